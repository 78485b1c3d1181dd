//! `ida-sim`: run, sweep, validate and describe IDA scenarios.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ida_core::policy::lever::LeverMode;
use ida_core::sim::config::parse_override;
use ida_core::sim::{
    describe, read_config_value, resolve, run_scenario, run_sweep, validate_run, CheckStatus,
    ConfigError, GridAxis, ScenarioConfig, SimContext, SweepError,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_INVARIANT: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ida-sim",
    version,
    about = "Deterministic epoch simulator for the IDA policy stack"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics, events and the final state.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a Cartesian grid of overrides, one output directory per point.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
        /// Swept key and values, `key=v1,v2,...`. Repeatable.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run a scenario and report the invariant suite.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Print the fully resolved configuration.
    Describe {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Verbatim,
    Distance,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, `dotted.key=value`. Repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Threshold placement for N.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, toml::Value)>, ConfigError> {
        let mut ov = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed)
                .map_err(|_| ConfigError::MalformedOverride(format!("seed={seed}")))?;
            ov.push(("seed".into(), toml::Value::Integer(seed)));
        }
        if let Some(mode) = self.mode {
            let m = match mode {
                ModeArg::Verbatim => LeverMode::Verbatim,
                ModeArg::Distance => LeverMode::Distance,
            };
            ov.push((
                "policy.lever.mode".into(),
                toml::Value::String(m.as_str().into()),
            ));
        }
        Ok(ov)
    }

    fn base_dir(&self) -> &Path {
        self.config.parent().unwrap_or(Path::new("."))
    }

    fn raw(&self) -> Result<(toml::Value, Vec<(String, toml::Value)>), ConfigError> {
        Ok((read_config_value(&self.config)?, self.overrides()?))
    }

    fn load(&self) -> Result<ScenarioConfig, ConfigError> {
        let (raw, ov) = self.raw()?;
        resolve(raw, &ov)
    }

    fn context(&self) -> Result<SimContext, ConfigError> {
        SimContext::new(self.load()?, self.base_dir())
    }
}

fn config_failure(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("config error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IDA_SIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Describe { common } => match common.load() {
            Ok(cfg) => {
                print!("{}", describe(&cfg));
                ExitCode::SUCCESS
            }
            Err(e) => config_failure(e),
        },
        Command::Run { common, out } => {
            let ctx = match common.context() {
                Ok(c) => c,
                Err(e) => return config_failure(e),
            };
            let run = run_scenario(&ctx);
            if let Err(e) = run.write(&out, &ctx.config) {
                eprintln!("writing outputs to {}: {e}", out.display());
                return ExitCode::from(EXIT_IO);
            }
            let s = &run.summary;
            println!(
                "{}: {} epochs, terminal coverage {}, converted fraction {}, mean capital efficiency {}",
                ctx.config.name, s.epochs, s.terminal_coverage, s.converted_fraction, s.mean_capital_efficiency
            );
            if s.aborted_epochs > 0 {
                eprintln!(
                    "{} epochs aborted on invariant violations",
                    s.aborted_epochs
                );
                return ExitCode::from(EXIT_INVARIANT);
            }
            ExitCode::SUCCESS
        }
        Command::Validate { common } => {
            let ctx = match common.context() {
                Ok(c) => c,
                Err(e) => return config_failure(e),
            };
            let run = run_scenario(&ctx);
            let results = validate_run(&ctx, &run);
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| r.status == CheckStatus::Fail) {
                ExitCode::from(EXIT_INVARIANT)
            } else {
                ExitCode::SUCCESS
            }
        }
        Command::Sweep {
            common,
            out,
            grid,
            jobs,
        } => {
            let axes = match grid
                .iter()
                .map(|g| GridAxis::parse(g))
                .collect::<Result<Vec<_>, _>>()
            {
                Ok(a) => a,
                Err(e) => return config_failure(e),
            };
            let (raw, ov) = match common.raw() {
                Ok(r) => r,
                Err(e) => return config_failure(e),
            };
            match run_sweep(&raw, &ov, &axes, common.base_dir(), &out, jobs) {
                Ok(points) => {
                    println!("{} grid points written to {}", points.len(), out.display());
                    if points.iter().any(|p| p.summary.aborted_epochs > 0) {
                        eprintln!("some grid points had aborted epochs");
                        return ExitCode::from(EXIT_INVARIANT);
                    }
                    ExitCode::SUCCESS
                }
                Err(SweepError::Config(e)) => config_failure(e),
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(EXIT_IO)
                }
            }
        }
    }
}
