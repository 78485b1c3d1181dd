//! Scenario configuration, agent behaviour and the deterministic epoch loop.
//!
//! Every random draw comes from a ChaCha stream keyed by the scenario seed
//! and a fixed stream id (prices, per-epoch agents, optimizer scenarios), so
//! a run is a pure function of its resolved configuration.

pub mod agents;
pub mod config;
pub mod output;
mod run;
mod step;
pub mod sweep;
pub mod validate;

pub use config::{describe, load_config, read_config_value, resolve, ConfigError, ScenarioConfig};
pub use output::{Event, MetricsRow, PoolMetrics};
pub use run::{run_scenario, RunOutput, RunSummary};
pub use step::{
    step_epoch, Cumulative, EpochOutcome, InvariantLog, SimContext, SimError, SimState,
};
pub use sweep::{run_sweep, GridAxis, SweepError, SweepPoint};
pub use validate::{brute_force_es, validate_run, CheckResult, CheckStatus};
