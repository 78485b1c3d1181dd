//! The epoch loop and run-level summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ConfigError, ScenarioConfig};
use super::output::{Event, MetricsRow, PoolMetrics};
use super::step::{step_epoch, InvariantLog, SimContext, SimState};
use crate::market::generate_price_path;
use crate::policy::pmo::PmoActionKind;
use crate::state::{coverage_ratio, SystemState};

impl SimContext {
    /// Prepares everything a run needs that does not change across epochs.
    /// `base_dir` resolves relative file references in the config.
    pub fn new(config: ScenarioConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        config.validate()?;
        let model = config.return_model().map_err(|e| ConfigError::Invalid {
            field: "price_model".into(),
            message: e.to_string(),
        })?;
        let injected_corr = config.injected_correlation(base_dir)?;
        let symbols = config.symbols();
        let initial: Vec<f64> = config
            .sorted_asset_indices()
            .iter()
            .map(|k| config.assets[*k].price)
            .collect();
        let prices = generate_price_path(&initial, &model, config.horizon, config.seed);
        let mut script: BTreeMap<u64, Vec<_>> = BTreeMap::new();
        for t in &config.script {
            let idx = symbols
                .iter()
                .position(|s| *s == t.pool)
                .expect("validated pool symbol");
            script
                .entry(t.epoch)
                .or_default()
                .push((idx, t.side, t.nominal, t.account.clone()));
        }
        Ok(Self {
            config,
            model,
            prices,
            injected_corr,
            script,
            symbols,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: u64,
    pub aborted_epochs: u64,
    pub terminal_coverage: f64,
    /// IDA burned by conversions over the initial circulating supply.
    pub converted_fraction: f64,
    pub mean_capital_efficiency: f64,
    pub conversions: u64,
    pub flow_over: f64,
    pub flow_under: f64,
    pub pool_flow: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub symbols: Vec<String>,
    pub rows: Vec<MetricsRow>,
    pub events: Vec<Event>,
    pub final_state: SystemState,
    pub summary: RunSummary,
    pub checks: InvariantLog,
}

fn aborted_row(state: &SystemState, epoch: u64, prev: Option<&MetricsRow>) -> MetricsRow {
    let pools = state
        .pools
        .iter()
        .enumerate()
        .map(|(i, p)| PoolMetrics {
            price: p.density.price,
            util: f64::NAN,
            fee: state.fee_states[i].prev_fee,
            collateral: p.collateral_long,
            open_inventory: crate::state::open_inventory(p),
            target: state.targets[i],
            n_threshold: prev.map_or(f64::NAN, |r| r.pools[i].n_threshold),
            velocity: 0.0,
            net_flow: 0.0,
            pmo: PmoActionKind::None,
        })
        .collect();
    MetricsRow {
        epoch,
        circulating_supply: state.circulating_supply,
        treasury: state.treasury,
        coverage: f64::NAN,
        capital_efficiency: f64::NAN,
        es: f64::NAN,
        psi: f64::NAN,
        delta_no: f64::NAN,
        delta_mn: f64::NAN,
        residual: crate::state::balance_sheet_residual(state),
        converted_ida: prev.map_or(0.0, |r| r.converted_ida),
        aborted: true,
        pools,
    }
}

/// Runs the scenario to its horizon. A failing epoch is rolled back, logged
/// and recorded as aborted; the loop then moves on.
pub fn run_scenario(ctx: &SimContext) -> RunOutput {
    let initial = ctx.config.initial_state();
    let initial_supply = initial.circulating_supply;
    let mut state = SimState::new(initial);
    let mut rows: Vec<MetricsRow> = Vec::with_capacity(ctx.config.horizon as usize);
    let mut events = Vec::new();

    for _ in 0..ctx.config.horizon {
        match step_epoch(&state, ctx) {
            Ok(out) => {
                state = out.state;
                events.extend(out.events);
                rows.push(out.row);
            }
            Err(e) => {
                let epoch = state.system.epoch;
                log::error!("epoch {epoch} aborted: {e}");
                events.push(Event::EpochAborted {
                    epoch,
                    error: e.to_string(),
                });
                rows.push(aborted_row(&state.system, epoch, rows.last()));
                state.system.epoch += 1;
                state.cum.aborted_epochs += 1;
            }
        }
    }

    let effs: Vec<f64> = rows
        .iter()
        .map(|r| r.capital_efficiency)
        .filter(|x| x.is_finite())
        .collect();
    let mean_eff = if effs.is_empty() {
        f64::NAN
    } else {
        effs.iter().sum::<f64>() / effs.len() as f64
    };
    let summary = RunSummary {
        epochs: rows.len() as u64,
        aborted_epochs: state.cum.aborted_epochs,
        terminal_coverage: coverage_ratio(&state.system, ctx.config.policy.collateral_mode)
            .unwrap_or(f64::NAN),
        converted_fraction: if initial_supply > 0.0 {
            state.cum.converted_ida / initial_supply
        } else {
            0.0
        },
        mean_capital_efficiency: mean_eff,
        conversions: state.cum.conversions,
        flow_over: state.cum.flow_over,
        flow_under: state.cum.flow_under,
        pool_flow: state.cum.pool_flow.clone(),
    };
    RunOutput {
        symbols: ctx.symbols.clone(),
        rows,
        events,
        final_state: state.system,
        summary,
        checks: state.checks,
    }
}

impl RunOutput {
    pub fn write(&self, dir: &Path, config: &ScenarioConfig) -> std::io::Result<()> {
        super::output::write_outputs(
            dir,
            &config.outputs,
            &self.symbols,
            &self.rows,
            &self.events,
            &self.final_state,
        )
    }
}
