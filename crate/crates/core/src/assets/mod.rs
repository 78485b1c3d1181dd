//! Asset-side management: weights of the asset base, the collateral-weighted
//! correlation lever, tail-risk estimation and the target optimizer.

mod correlation;
mod optimize;
mod risk;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{open_inventory, SystemState};

pub use correlation::CorrelationMatrix;
pub use optimize::{
    compare_plans, evaluate_plan, optimize_targets, plan_exposures, OptimizerConfig,
    OptimizerInputs, PlanEvaluation, SearchStrategy, TargetPlan,
};
pub use risk::{
    expected_shortfall, regime_scaling, simulate_losses, simulate_returns, tail_count, EsEstimate,
    EsParams, RegimeParams, ReturnScenarios,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssetError {
    #[error("attributable asset base is not positive")]
    ZeroAssets,
    #[error("pool {0} has no counterpart pool with positive collateral")]
    NoCounterparts(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid correlation matrix: {0}")]
    InvalidCorrelation(String),
    #[error("loss sample is empty")]
    EmptySample,
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("correlation file: {0}")]
    File(String),
}

/// Nominal value of each pool's contribution to the asset base,
/// `L(I − I_LP) + L(C)`.
pub fn asset_nominals(system: &SystemState) -> Vec<f64> {
    system
        .pools
        .iter()
        .map(|p| p.density.nominal(open_inventory(p)) + p.density.nominal(p.collateral_long))
        .collect()
}

/// Weight of each pool in the asset base. Pools with a non-positive
/// contribution get weight 0; the rest are normalized to sum to 1.
pub fn asset_weights(system: &SystemState) -> Result<Vec<f64>, AssetError> {
    weights_from_nominals(&asset_nominals(system))
}

pub fn weights_from_nominals(nominals: &[f64]) -> Result<Vec<f64>, AssetError> {
    let total: f64 = nominals.iter().filter(|a| **a > 0.0).sum();
    if !(total > 0.0) {
        return Err(AssetError::ZeroAssets);
    }
    Ok(nominals
        .iter()
        .map(|a| if *a > 0.0 { a / total } else { 0.0 })
        .collect())
}

/// Correlation of pool `i` with the rest of the asset base, weighted by
/// the other pools' collateral.
pub fn weighted_correlation(
    i: usize,
    corr: &CorrelationMatrix,
    collaterals: &[f64],
) -> Result<f64, AssetError> {
    if collaterals.len() != corr.dim() {
        return Err(AssetError::DimensionMismatch {
            expected: corr.dim(),
            got: collaterals.len(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (z, c) in collaterals.iter().enumerate() {
        if z == i || *c <= 0.0 {
            continue;
        }
        num += corr.get(i, z) * c;
        den += c;
    }
    if den <= 0.0 {
        return Err(AssetError::NoCounterparts(i));
    }
    Ok((num / den).clamp(-1.0, 1.0))
}

/// Responsiveness gain as a constant or an affine function `g0 + g1·w` of
/// the pool's weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    Constant(f64),
    Affine { g0: f64, g1: f64 },
}

impl Gain {
    pub fn eval(&self, weight: f64) -> f64 {
        match *self {
            Gain::Constant(g) => g,
            Gain::Affine { g0, g1 } => g0 + g1 * weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrAdjustParams {
    pub alpha_neg_gain: Gain,
    pub alpha_pos_gain: Gain,
    pub corr_beta: f64,
    pub corr_gamma: f64,
    pub corr_phi: f64,
    #[serde(default = "default_tan_guard")]
    pub tan_guard: f64,
}

fn default_tan_guard() -> f64 {
    0.99
}

impl Default for CorrAdjustParams {
    fn default() -> Self {
        Self {
            alpha_neg_gain: Gain::Affine { g0: 0.02, g1: 0.03 },
            alpha_pos_gain: Gain::Affine { g0: 0.05, g1: 0.05 },
            corr_beta: 1.0,
            corr_gamma: 1.0,
            corr_phi: 1.0,
            tan_guard: default_tan_guard(),
        }
    }
}

impl CorrAdjustParams {
    pub fn validate(&self) -> Result<(), AssetError> {
        if !(self.corr_gamma > 0.0 && self.corr_phi > 0.0) {
            return Err(AssetError::Params(
                "corr_gamma and corr_phi must be positive".into(),
            ));
        }
        if !(self.tan_guard > 0.0 && self.tan_guard < 1.0) {
            return Err(AssetError::Params(format!(
                "tan_guard {} outside (0, 1)",
                self.tan_guard
            )));
        }
        if !self.corr_beta.is_finite() {
            return Err(AssetError::Params("corr_beta must be finite".into()));
        }
        Ok(())
    }
}

/// `sgn(x)·|x|^p`.
pub fn signed_pow(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(p)
    }
}

/// Target-utilization adjustment ΔU for a pool with weighted correlation
/// `rho` and asset weight `weight`:
/// `α±(w)·sgnpow(tan(clamp(β·sgnpow(ρ, γ))), φ)`.
pub fn utilization_adjustment(rho: f64, weight: f64, params: &CorrAdjustParams) -> f64 {
    if rho == 0.0 {
        return 0.0;
    }
    let alpha = if rho < 0.0 {
        params.alpha_neg_gain.eval(weight)
    } else {
        params.alpha_pos_gain.eval(weight)
    };
    let limit = params.tan_guard * std::f64::consts::FRAC_PI_2;
    let arg = (params.corr_beta * signed_pow(rho, params.corr_gamma)).clamp(-limit, limit);
    alpha * signed_pow(arg.tan(), params.corr_phi)
}

/// Bounds used when a per-pool target would leave (0, 1).
pub const TARGET_MARGIN: f64 = 1e-6;

/// `U*^i = U* − ΔU^i`, clamped into the open unit interval.
pub fn per_pool_target(base_target: f64, du: f64) -> f64 {
    let raw = base_target - du;
    let value = raw.clamp(TARGET_MARGIN, 1.0 - TARGET_MARGIN);
    if value != raw {
        log::warn!("per-pool target {raw} clamped to {value}");
    }
    value
}

/// `Σ_i Σ_j w_i w_j σ_i σ_j ρ_ij`.
pub fn portfolio_variance(
    weights: &[f64],
    vols: &[f64],
    corr: &CorrelationMatrix,
) -> Result<f64, AssetError> {
    let n = corr.dim();
    for len in [weights.len(), vols.len()] {
        if len != n {
            return Err(AssetError::DimensionMismatch {
                expected: n,
                got: len,
            });
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += weights[i] * weights[j] * vols[i] * vols[j] * corr.get(i, j);
        }
    }
    Ok(total.max(0.0))
}

pub fn portfolio_volatility(
    weights: &[f64],
    vols: &[f64],
    corr: &CorrelationMatrix,
) -> Result<f64, AssetError> {
    portfolio_variance(weights, vols, corr).map(f64::sqrt)
}
