//! Agent flows and the rebalancing-auction stub.
//!
//! Trades keep the balance sheet closed at constant prices: the nominal
//! change of a pool's open inventory always equals the change in
//! circulating supply, with fees split between the pool's LPs and the
//! treasury.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{AuctionParams, HoarderModel, SlpModel};
use crate::policy::fee::{differential_fee, update_fee_state, FeeCase, FeeParams, Side};
use crate::state::{
    inventory_gap_to_target, open_inventory, utilization_rate, PoolState, SystemState,
};

/// Utilization used by the levers. A pool without collateral but with open
/// inventory reads as infinitely utilized in the direction of its inventory.
pub fn lever_utilization(pool: &PoolState) -> f64 {
    utilization_rate(pool).unwrap_or_else(|_| f64::INFINITY.copysign(open_inventory(pool)))
}

/// Largest share of a pool's inventory a single sell may withdraw.
pub const MAX_SELL_SHARE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TradeFill {
    pub side: Side,
    pub gross: f64,
    pub fee: f64,
    pub fee_case: FeeCase,
    /// Signed change of the trader's IDA balance.
    pub ida: f64,
    pub util_before: f64,
    pub target: f64,
    pub treasury_fee: f64,
}

/// Applies one trade of `gross` peg-units against pool `idx`.
///
/// A buy deposits `gross/P` units of the asset and mints `gross − fee` IDA.
/// A sell burns up to `gross` IDA from `account` and pays out
/// `(gross − fee)/P` units. The LP share of the fee stays in the pool as LP
/// inventory; the treasury share leaves the pool. Returns `None` when
/// nothing could be traded.
pub fn apply_trade(
    system: &mut SystemState,
    idx: usize,
    side: Side,
    gross: f64,
    account: &str,
    fee_params: &FeeParams,
    treasury_share: f64,
) -> Option<TradeFill> {
    let target = system.targets[idx];
    let util = lever_utilization(&system.pools[idx]);
    let quote = differential_fee(util, side, target, system.fee_states[idx], fee_params);
    let price = system.pools[idx].density.price;

    let gross = match side {
        Side::Buy => gross,
        Side::Sell => {
            let cap = MAX_SELL_SHARE * price * system.pools[idx].inventory;
            let wanted = gross.min(cap).min(system.ledger.balance(account));
            system.ledger.debit(account, wanted)
        }
    };
    if !(gross > 0.0) {
        return None;
    }
    let fee = quote.fee * gross;
    let to_treasury = treasury_share * fee;
    let to_lps = fee - to_treasury;
    let pool = &mut system.pools[idx];
    let ida = match side {
        Side::Buy => {
            let minted = gross - fee;
            pool.inventory += (gross - to_treasury) / price;
            pool.lp_inventory += to_lps / price;
            pool.accounting_state -= minted;
            system.ledger.credit(account, minted);
            minted
        }
        Side::Sell => {
            pool.inventory -= (gross - to_lps) / price;
            pool.lp_inventory += to_lps / price;
            pool.accounting_state += gross;
            -gross
        }
    };
    system.treasury += to_treasury;
    system.fee_states[idx] = update_fee_state(system.fee_states[idx], quote.fee, util);
    system.sync_supply();
    Some(TradeFill {
        side,
        gross,
        fee: quote.fee,
        fee_case: quote.case,
        ida,
        util_before: util,
        target,
        treasury_fee: to_treasury,
    })
}

/// Logit choice over `fees`: pool `i` is drawn with probability
/// proportional to `exp(−elasticity·fee_i)`. `None` entries are excluded.
pub fn choose_pool<R: Rng>(fees: &[Option<f64>], elasticity: f64, rng: &mut R) -> Option<usize> {
    let min = fees.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let weights: Vec<f64> = fees
        .iter()
        .map(|f| f.map_or(0.0, |f| (-elasticity * (f - min)).exp()))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        last = Some(i);
        if u < *w {
            return Some(i);
        }
        u -= w;
    }
    last
}

/// Whether hoarder `k` liquidates given the announced conversion fraction.
pub fn hoarder_sells(model: &HoarderModel, k: usize, announced: f64) -> bool {
    model.hold_utility_of(k) - model.cost_expectation_gain * announced <= model.sell_utility
}

/// Population std of the last `window` entries of column `col`.
pub fn realized_volatility(
    returns: &std::collections::VecDeque<Vec<f64>>,
    col: usize,
    window: usize,
) -> f64 {
    let n = returns.len().min(window);
    if n < 2 {
        return 0.0;
    }
    let tail = returns.iter().skip(returns.len() - n).map(|r| r[col]);
    let mean = tail.clone().sum::<f64>() / n as f64;
    (tail.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt()
}

/// Next long-collateral level: mean reversion toward a volatility-scaled
/// target plus multiplicative noise, floored at a fraction of `base`.
pub fn slp_collateral<R: Rng>(
    current: f64,
    base: f64,
    vol: f64,
    model: &SlpModel,
    rng: &mut R,
) -> f64 {
    let target = base / (1.0 + model.response_gain * vol);
    let z: f64 = if model.noise_scale > 0.0 {
        StandardNormal.sample(rng)
    } else {
        0.0
    };
    let next = current + model.reversion * (target - current) + model.noise_scale * current * z;
    next.max(model.floor_fraction * base).max(0.0)
}

/// Units moved by an auction fill and what they cost the treasury.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuctionFill {
    pub units: f64,
    pub nominal: f64,
    pub premium: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuctionOutcome {
    NoOp,
    Warning(String),
    Filled {
        pool: PoolState,
        treasury: f64,
        fill: AuctionFill,
    },
}

/// Rebalancing stub for one pool that has been above target for
/// `epochs_above` epochs. The premium `rate·nominal` is paid from the
/// treasury and the fill is scaled down when the treasury cannot cover it.
/// The returned pool has released `units` of open inventory and its
/// accounting state credited by their nominal; the receiving side of the
/// trade is left to the caller.
pub fn rebalancing_auction_stub(
    pool: &PoolState,
    treasury: f64,
    target: f64,
    epochs_above: u32,
    params: &AuctionParams,
) -> AuctionOutcome {
    let util = lever_utilization(pool);
    if !(util > target) || epochs_above < params.trigger_epochs {
        return AuctionOutcome::NoOp;
    }
    let gap = inventory_gap_to_target(pool, target);
    if !(gap > 0.0) || params.fill_fraction <= 0.0 {
        return AuctionOutcome::NoOp;
    }
    if treasury <= 0.0 {
        return AuctionOutcome::Warning(format!(
            "auction for {} skipped: treasury is empty",
            pool.asset
        ));
    }
    let price = pool.density.price;
    let mut units = params.fill_fraction * gap;
    let mut premium = params.premium_rate * price * units;
    if premium > treasury {
        units *= treasury / premium;
        premium = treasury;
    }
    let nominal = price * units;
    let mut next = pool.clone();
    next.inventory -= units;
    next.accounting_state += nominal;
    AuctionOutcome::Filled {
        pool: next,
        treasury: treasury - premium,
        fill: AuctionFill {
            units,
            nominal,
            premium,
        },
    }
}
