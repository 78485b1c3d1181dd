//! Differential AMM fee for IDA trades.
//!
//! The fee depends on trade direction and on where the pool's utilization sits
//! relative to its target. Buys of IDA get cheaper as utilization rises toward
//! the target and expensive beyond it; sells are priced so that flows pulling
//! an over-utilized pool back toward target pay close to the floor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeeParamsError {
    #[error("fee parameters must satisfy 0 < theta_floor <= theta_0 < theta_cap <= 1 (got floor={floor}, base={base}, cap={cap})")]
    Ordering { floor: f64, base: f64, cap: f64 },
    #[error("d_impact must be a finite non-negative number (got {0})")]
    Impact(f64),
}

/// Trade direction from the trader's perspective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Trader buys IDA, depositing the pool's asset.
    Buy,
    /// Trader sells IDA, withdrawing the pool's asset.
    Sell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeeParams {
    pub theta_0: f64,
    pub theta_floor: f64,
    pub d_impact: f64,
    #[serde(default = "default_cap")]
    pub theta_cap: f64,
}

fn default_cap() -> f64 {
    1.0
}

impl Default for FeeParams {
    fn default() -> Self {
        Self {
            theta_0: 0.003,
            theta_floor: 0.001,
            d_impact: 4.0,
            theta_cap: 1.0,
        }
    }
}

impl FeeParams {
    pub fn validate(&self) -> Result<(), FeeParamsError> {
        let ok = self.theta_floor > 0.0
            && self.theta_floor <= self.theta_0
            && self.theta_0 < self.theta_cap
            && self.theta_cap <= 1.0;
        if !ok {
            return Err(FeeParamsError::Ordering {
                floor: self.theta_floor,
                base: self.theta_0,
                cap: self.theta_cap,
            });
        }
        if !(self.d_impact.is_finite() && self.d_impact >= 0.0) {
            return Err(FeeParamsError::Impact(self.d_impact));
        }
        Ok(())
    }

    fn clamp(&self, fee: f64) -> f64 {
        fee.clamp(self.theta_floor, self.theta_cap)
    }
}

/// Fee memory of one pool: the last executed fee and the utilization it was
/// quoted at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeeState {
    pub prev_fee: f64,
    pub prev_util: f64,
}

/// Offset above target used to seed the utilization memory before any trade.
pub const SEED_UTIL_OFFSET: f64 = 1e-6;

impl FeeState {
    pub fn seeded(theta_0: f64, target_u: f64) -> Self {
        Self {
            prev_fee: theta_0,
            prev_util: target_u + SEED_UTIL_OFFSET,
        }
    }
}

pub fn update_fee_state(_state: FeeState, new_fee: f64, new_util: f64) -> FeeState {
    FeeState {
        prev_fee: new_fee,
        prev_util: new_util,
    }
}

/// Which branch of the schedule produced a quote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeeCase {
    NonPositiveInventory,
    BuyBelowTarget,
    BuyAboveTarget,
    SellAboveTarget,
    SellBelowTarget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeeQuote {
    pub fee: f64,
    pub case: FeeCase,
    /// Set when a sell above target met a utilization memory equal to the
    /// target; the quote falls back to the floor.
    pub degenerate_history: bool,
}

/// Quotes the fee for a trade at pre-trade utilization `util`.
///
/// Pools with non-positive open inventory (`util <= 0`) pay the base fee.
/// Equality `util == target_u` takes the at-or-below-target branches.
pub fn differential_fee(
    util: f64,
    side: Side,
    target_u: f64,
    state: FeeState,
    params: &FeeParams,
) -> FeeQuote {
    let FeeParams {
        theta_0,
        theta_floor: floor,
        d_impact,
        ..
    } = *params;
    let quote = |fee: f64, case| FeeQuote {
        fee: params.clamp(fee),
        case,
        degenerate_history: false,
    };

    if util <= 0.0 {
        return quote(theta_0, FeeCase::NonPositiveInventory);
    }
    let ratio = util / target_u;
    match side {
        Side::Buy if target_u >= util => {
            quote(theta_0 - (theta_0 - floor) * ratio, FeeCase::BuyBelowTarget)
        }
        Side::Buy => quote(floor * (1.0 + d_impact * ratio), FeeCase::BuyAboveTarget),
        Side::Sell if target_u >= util => quote(
            floor + (theta_0 - floor) * (1.0 - ratio),
            FeeCase::SellBelowTarget,
        ),
        Side::Sell => {
            let span = state.prev_util - target_u;
            if span == 0.0 {
                return FeeQuote {
                    fee: floor,
                    case: FeeCase::SellAboveTarget,
                    degenerate_history: true,
                };
            }
            // Rising utilization since the last trade would push the quote
            // above the remembered fee; it is held at that fee instead.
            let prev = state.prev_fee;
            quote(
                (prev - (prev - floor) * (1.0 - (util - target_u) / span)).min(prev),
                FeeCase::SellAboveTarget,
            )
        }
    }
}
