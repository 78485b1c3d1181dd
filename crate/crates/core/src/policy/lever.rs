//! Dynamic placement of the PMO threshold `N` between the fee threshold `O`
//! and the immediate-conversion threshold `M`.
//!
//! Two impact factors move `N`: the variance of circulating supply (a velocity
//! proxy, widening the room left to fees) and the treasury's size (which can
//! fund rebalancing premiums and so pulls `N` toward `M`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LeverError {
    #[error("circulating supply is zero")]
    ZeroSupply,
    #[error("mean velocity is zero")]
    ZeroMean,
    #[error("supply variance needs at least two observations (got {0})")]
    InsufficientHistory(usize),
    #[error("invalid lever parameters: {0}")]
    Params(String),
}

/// Interpretation of the `N` blend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeverMode {
    /// `β·(M − O − δ_NO) + (1−β)·(M − δ_MN)`.
    #[default]
    Verbatim,
    /// `β·(O + δ_NO) + (1−β)·(M − δ_MN)`, reading `δ_NO` as the distance `N − O`.
    Distance,
}

impl LeverMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LeverMode::Verbatim => "verbatim",
            LeverMode::Distance => "distance",
        }
    }
}

impl std::str::FromStr for LeverMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "distance" => Ok(Self::Distance),
            other => Err(format!(
                "unknown lever mode '{other}' (expected verbatim or distance)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeverParams {
    pub delta_no_min: f64,
    pub delta_no_max: f64,
    pub delta_mn_min: f64,
    pub delta_mn_max: f64,
    pub l_gain: f64,
    /// Exponent on ψ; also accepted under the name `z_exp`.
    #[serde(alias = "z_exp")]
    pub k_exp: f64,
    pub j_gain: f64,
    pub d_exp: f64,
    pub beta_blend: f64,
    pub variance_window: usize,
    #[serde(default)]
    pub mode: LeverMode,
    /// Margin kept between `N` and each of `O`, `M` after clamping.
    #[serde(default = "default_clamp_eps")]
    pub clamp_eps: f64,
}

fn default_clamp_eps() -> f64 {
    1e-6
}

impl Default for LeverParams {
    fn default() -> Self {
        Self {
            delta_no_min: 0.05,
            delta_no_max: 0.2,
            delta_mn_min: 0.05,
            delta_mn_max: 0.2,
            l_gain: 50.0,
            k_exp: 1.0,
            j_gain: 2.0,
            d_exp: 1.0,
            beta_blend: 0.5,
            variance_window: 20,
            mode: LeverMode::Verbatim,
            clamp_eps: default_clamp_eps(),
        }
    }
}

impl LeverParams {
    pub fn validate(&self) -> Result<(), LeverError> {
        let ordered = |lo: f64, hi: f64| 0.0 <= lo && lo <= hi && hi.is_finite();
        if !ordered(self.delta_no_min, self.delta_no_max)
            || !ordered(self.delta_mn_min, self.delta_mn_max)
        {
            return Err(LeverError::Params(
                "need 0 <= delta_*_min <= delta_*_max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta_blend) {
            return Err(LeverError::Params(format!(
                "beta_blend {} outside [0, 1]",
                self.beta_blend
            )));
        }
        if self.variance_window < 2 {
            return Err(LeverError::Params(
                "variance_window must be at least 2".into(),
            ));
        }
        if !(self.k_exp > 0.0 && self.d_exp > 0.0) {
            return Err(LeverError::Params(
                "k_exp and d_exp must be positive".into(),
            ));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(LeverError::Params("clamp_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityReading {
    pub absolute: f64,
    pub relative: f64,
}

/// Traded volume per unit of circulating supply.
pub fn absolute_velocity(volume: f64, supply: f64) -> Result<f64, LeverError> {
    if supply <= 0.0 {
        return Err(LeverError::ZeroSupply);
    }
    Ok(volume / supply)
}

pub fn relative_velocity(v: f64, mean_v: f64) -> Result<f64, LeverError> {
    if mean_v <= 0.0 {
        return Err(LeverError::ZeroMean);
    }
    Ok(v / mean_v)
}

/// Absolute and relative velocity for every pool from per-pool volumes.
/// Relative velocity is 0 when no pool traded.
pub fn velocities(volumes: &[f64], supply: f64) -> Result<Vec<VelocityReading>, LeverError> {
    let absolute = volumes
        .iter()
        .map(|tv| absolute_velocity(*tv, supply))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = absolute.iter().sum::<f64>() / absolute.len().max(1) as f64;
    Ok(absolute
        .into_iter()
        .map(|a| VelocityReading {
            absolute: a,
            relative: relative_velocity(a, mean).unwrap_or(0.0),
        })
        .collect())
}

/// Scale-free supply variance ψ: population variance over squared mean.
pub fn supply_variance(history: &[f64]) -> Result<f64, LeverError> {
    if history.len() < 2 {
        return Err(LeverError::InsufficientHistory(history.len()));
    }
    let n = history.len() as f64;
    let mean = history.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let var = history.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var / (mean * mean))
}

/// Gap between `N` and `O` allowed by the supply variance.
pub fn delta_no(psi: f64, params: &LeverParams) -> f64 {
    let (lo, hi) = (params.delta_no_min, params.delta_no_max);
    ((hi - lo) * params.l_gain * psi.max(0.0).powf(params.k_exp) + lo)
        .min(hi)
        .clamp(lo, hi)
}

/// Gap between `M` and `N` given the normalized treasury.
pub fn delta_mn(treasury: f64, params: &LeverParams) -> f64 {
    let (lo, hi) = (params.delta_mn_min, params.delta_mn_max);
    (hi - (hi - lo) * params.j_gain * treasury.max(0.0).powf(params.d_exp))
        .max(lo)
        .clamp(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReading {
    /// `N` after clamping into `(O, M)`.
    pub value: f64,
    /// Blend before clamping.
    pub raw: f64,
    pub clamped: bool,
}

/// Blended PMO threshold `N`, clamped strictly inside `(o, m)`.
pub fn threshold_n(m: f64, o: f64, d_no: f64, d_mn: f64, params: &LeverParams) -> ThresholdReading {
    let beta = params.beta_blend;
    let variance_leg = match params.mode {
        LeverMode::Verbatim => m - o - d_no,
        LeverMode::Distance => o + d_no,
    };
    let raw = beta * variance_leg + (1.0 - beta) * (m - d_mn);
    let eps = params.clamp_eps.min(0.25 * (m - o));
    let (lo, hi) = (o + eps, m - eps);
    let value = raw.clamp(lo, hi);
    ThresholdReading {
        value,
        raw,
        clamped: value != raw,
    }
}
