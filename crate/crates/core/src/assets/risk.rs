use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optimize::{plan_exposures, TargetPlan};
use super::AssetError;
use crate::market::{stream_rng, ReturnModel};
use crate::state::SystemState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsParams {
    /// Confidence level; the tail holds the worst `1 − alpha_conf` of losses.
    pub alpha_conf: f64,
    /// Portfolio ES ceiling in peg-units; plans must stay strictly below it.
    pub es_cap: f64,
    pub sample_count: usize,
    /// Loss horizon in epochs.
    pub horizon: u32,
}

impl Default for EsParams {
    fn default() -> Self {
        Self {
            alpha_conf: 0.95,
            es_cap: f64::INFINITY,
            sample_count: 2000,
            horizon: 10,
        }
    }
}

impl EsParams {
    pub fn validate(&self) -> Result<(), AssetError> {
        if !(self.alpha_conf > 0.0 && self.alpha_conf < 1.0) {
            return Err(AssetError::Params(format!(
                "alpha_conf {} outside (0, 1)",
                self.alpha_conf
            )));
        }
        if self.sample_count < 100 {
            return Err(AssetError::Params(
                "sample_count must be at least 100".into(),
            ));
        }
        if self.es_cap.is_nan() || self.horizon == 0 {
            return Err(AssetError::Params(
                "es_cap must be a number and horizon at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsEstimate {
    /// Mean of the tail losses.
    pub es: f64,
    /// Smallest loss inside the tail.
    pub var: f64,
    pub tail_count: usize,
}

/// Number of tail observations `⌈(1 − alpha)·n⌉`, at least 1. Products that
/// land within rounding noise of an integer are not pushed up by `ceil`.
pub fn tail_count(n: usize, alpha_conf: f64) -> usize {
    let x = (1.0 - alpha_conf) * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n.max(1))
}

/// Historical expected shortfall of a loss-positive sample: losses are
/// sorted from worst down and the first `tail_count` are averaged in that
/// order.
pub fn expected_shortfall(losses: &[f64], alpha_conf: f64) -> Result<EsEstimate, AssetError> {
    if losses.is_empty() {
        return Err(AssetError::EmptySample);
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = tail_count(sorted.len(), alpha_conf);
    let sum: f64 = sorted[..k].iter().sum();
    Ok(EsEstimate {
        es: sum / k as f64,
        var: sorted[k - 1],
        tail_count: k,
    })
}

/// Simple returns over the loss horizon, row-major by scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnScenarios {
    n_assets: usize,
    returns: Vec<f64>,
}

impl ReturnScenarios {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_assets = rows.first().map_or(0, Vec::len);
        Self {
            n_assets,
            returns: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn len(&self) -> usize {
        if self.n_assets == 0 {
            0
        } else {
            self.returns.len() / self.n_assets
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.returns[s * self.n_assets..(s + 1) * self.n_assets]
    }

    /// Portfolio loss `−Σ_i A^i·r_i` of every scenario.
    pub fn losses(&self, exposures: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|s| {
                -self
                    .row(s)
                    .iter()
                    .zip(exposures)
                    .map(|(r, a)| a * r)
                    .sum::<f64>()
            })
            .collect()
    }
}

const SCENARIO_CHUNK: usize = 1024;
const SCENARIO_STREAM_BASE: u64 = 1 << 32;

/// Monte Carlo horizon returns. Chunks of scenarios draw from their own
/// substream of `seed`, so the sample does not depend on the worker count.
pub fn simulate_returns(
    model: &ReturnModel,
    sample_count: usize,
    horizon: u32,
    seed: u64,
) -> ReturnScenarios {
    let n = model.len();
    let chunks = sample_count.div_ceil(SCENARIO_CHUNK);
    let returns: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let rows = SCENARIO_CHUNK.min(sample_count - c * SCENARIO_CHUNK);
            let mut rng = stream_rng(seed, SCENARIO_STREAM_BASE + c as u64);
            let mut buf = vec![0.0; n];
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                model.sample_horizon(&mut rng, horizon, &mut buf);
                out.extend(buf.iter().map(|x| x.exp_m1()));
            }
            out
        })
        .collect();
    ReturnScenarios {
        n_assets: n,
        returns,
    }
}

/// Loss sample of the asset base a plan implies.
pub fn simulate_losses(
    system: &SystemState,
    plan: &TargetPlan,
    model: &ReturnModel,
    seed: u64,
    es: &EsParams,
) -> Vec<f64> {
    let scenarios = simulate_returns(model, es.sample_count, es.horizon, seed);
    let exposures = plan_exposures(system, plan).unwrap_or_else(|| vec![0.0; system.pools.len()]);
    scenarios.losses(&exposures)
}

/// Piecewise-linear map from ES relative to the asset base onto a scale
/// factor for correlation adjustments: 1 up to `stable`, the midpoint of
/// `[1, s_max]` at `knee`, `s_max` from `turbulent` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeParams {
    pub stable: f64,
    pub knee: f64,
    pub turbulent: f64,
    pub s_max: f64,
}

impl Default for RegimeParams {
    fn default() -> Self {
        Self {
            stable: 0.02,
            knee: 0.05,
            turbulent: 0.1,
            s_max: 2.0,
        }
    }
}

impl RegimeParams {
    pub fn validate(&self) -> Result<(), AssetError> {
        if !(0.0 <= self.stable
            && self.stable < self.knee
            && self.knee < self.turbulent
            && self.turbulent.is_finite())
        {
            return Err(AssetError::Params(
                "regime points need 0 <= stable < knee < turbulent".into(),
            ));
        }
        if !(self.s_max >= 1.0 && self.s_max.is_finite()) {
            return Err(AssetError::Params("s_max must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn regime_scaling(es_ratio: f64, params: &RegimeParams) -> f64 {
    let RegimeParams {
        stable,
        knee,
        turbulent,
        s_max,
    } = *params;
    let mid = 0.5 * (1.0 + s_max);
    if !(es_ratio > stable) {
        1.0
    } else if es_ratio <= knee {
        1.0 + (mid - 1.0) * (es_ratio - stable) / (knee - stable)
    } else if es_ratio < turbulent {
        mid + (s_max - mid) * (es_ratio - knee) / (turbulent - knee)
    } else {
        s_max
    }
}
