//! Parameter sweeps over a Cartesian grid of config overrides.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::config::{parse_literal, resolve, ConfigError};
use super::run::{run_scenario, RunSummary};
use super::step::SimContext;

/// One swept key and its candidate values, parsed from `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
    raw: Vec<String>,
}

impl GridAxis {
    pub fn parse(arg: &str) -> Result<Self, ConfigError> {
        let malformed = || ConfigError::MalformedOverride(arg.to_string());
        let (key, values) = arg.split_once('=').ok_or_else(malformed)?;
        let key = key.trim();
        let raw: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if key.is_empty() || raw.is_empty() {
            return Err(malformed());
        }
        let values = raw.iter().map(|v| parse_literal(v)).collect();
        Ok(Self {
            key: key.to_string(),
            values,
            raw,
        })
    }
}

/// All grid points, the last axis varying fastest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<usize>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                (0..axis.values.len()).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub index: usize,
    pub labels: Vec<String>,
    pub summary: RunSummary,
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("writing sweep output: {0}")]
    Io(#[from] std::io::Error),
    #[error("building worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// Runs every grid point with `jobs` workers and writes each run into
/// `out/point-NNN` plus a `summary.csv`. Output does not depend on `jobs`.
pub fn run_sweep(
    raw: &toml::Value,
    overrides: &[(String, toml::Value)],
    axes: &[GridAxis],
    base_dir: &Path,
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepPoint>, SweepError> {
    let points = grid_points(axes);
    let mut configs = Vec::with_capacity(points.len());
    for p in &points {
        let mut ov = overrides.to_vec();
        ov.extend(
            axes.iter()
                .zip(p)
                .map(|(a, k)| (a.key.clone(), a.values[*k].clone())),
        );
        configs.push(resolve(raw.clone(), &ov)?);
    }
    let contexts = configs
        .into_iter()
        .map(|c| SimContext::new(c, base_dir))
        .collect::<Result<Vec<_>, _>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?;
    let results: Vec<std::io::Result<RunSummary>> = pool.install(|| {
        contexts
            .par_iter()
            .enumerate()
            .map(|(k, ctx)| {
                let run = run_scenario(ctx);
                run.write(&out.join(format!("point-{k:03}")), &ctx.config)?;
                Ok(run.summary)
            })
            .collect()
    });

    let mut sweep = Vec::with_capacity(results.len());
    for ((k, p), r) in points.iter().enumerate().zip(results) {
        let labels = axes.iter().zip(p).map(|(a, i)| a.raw[*i].clone()).collect();
        sweep.push(SweepPoint {
            index: k,
            labels,
            summary: r?,
        });
    }
    write_summary(out, axes, &sweep)?;
    Ok(sweep)
}

fn write_summary(out: &Path, axes: &[GridAxis], points: &[SweepPoint]) -> std::io::Result<()> {
    std::fs::create_dir_all(out)?;
    let file = std::io::BufWriter::new(std::fs::File::create(out.join("summary.csv"))?);
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["point".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(
        [
            "terminal_coverage",
            "converted_fraction",
            "mean_capital_efficiency",
            "aborted_epochs",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for p in points {
        let mut rec = vec![format!("point-{:03}", p.index)];
        rec.extend(p.labels.iter().cloned());
        rec.extend([
            p.summary.terminal_coverage.to_string(),
            p.summary.converted_fraction.to_string(),
            p.summary.mean_capital_efficiency.to_string(),
            p.summary.aborted_epochs.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| e.into_error())?.flush()
}
