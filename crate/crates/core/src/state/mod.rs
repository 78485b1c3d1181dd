//! Balance-sheet data model.
//!
//! Units: volumes are asset-units, nominal values are peg-units (the IDA peg,
//! one IDA = one peg-unit), utilizations and rates are dimensionless fractions.
//! All types serialize to the snapshot JSON schema with their field names
//! unchanged.

mod accounting;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::policy::fee::FeeState;
use crate::policy::pmo::PmoPoolState;

pub use accounting::{
    attributable_assets, balance_sheet_residual, capital_efficiency, capital_efficiency_approx,
    capital_efficiency_at_target, circulating_supply_nominal, coverage_ratio,
    inventory_gap_to_target, open_inventory, open_inventory_nominals, utilization_rate,
    AccountingError, CollateralMode, OpenInventoryNominals,
};

/// Identifier of a pool's asset. Ordering follows `id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AssetId {
    pub id: u32,
    pub symbol: String,
}

impl AssetId {
    pub fn new(id: u32, symbol: impl Into<String>) -> Self {
        Self {
            id,
            symbol: symbol.into(),
        }
    }
}

impl std::fmt::Display for AssetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.symbol)
    }
}

/// External liquidity density: maps an asset volume to its peg-unit value.
///
/// With `depth_slope = 0` valuation is linear. A positive slope applies a
/// quadratic slippage haircut `price·v − ½·slope·v²`, held flat past the
/// volume where it would start to decrease so that valuation stays monotone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiquidityDensity {
    pub price: f64,
    #[serde(default)]
    pub depth_slope: f64,
}

impl LiquidityDensity {
    pub fn linear(price: f64) -> Self {
        Self {
            price,
            depth_slope: 0.0,
        }
    }

    /// Nominal value of `volume` asset-units. Odd in `volume`.
    pub fn nominal(&self, volume: f64) -> f64 {
        if self.depth_slope <= 0.0 {
            return self.price * volume;
        }
        let v = volume.abs();
        let saturation = self.price / self.depth_slope;
        let value = if v >= saturation {
            0.5 * self.price * saturation
        } else {
            self.price * v - 0.5 * self.depth_slope * v * v
        };
        value.copysign(volume)
    }
}

/// One asset's pool together with its collateral vaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub asset: AssetId,
    pub inventory: f64,
    pub lp_inventory: f64,
    pub collateral_long: f64,
    #[serde(default)]
    pub collateral_short: f64,
    pub coll_rate: f64,
    /// IDA-denominated accounting state of the pool's open inventory.
    /// Negative when the system owes nominal value against the pool.
    pub accounting_state: f64,
    pub local_price: f64,
    pub density: LiquidityDensity,
}

impl PoolState {
    /// A pool whose accounting state matches its open inventory at the
    /// external price, with local price equal to the external price.
    pub fn new(
        asset: AssetId,
        inventory: f64,
        lp_inventory: f64,
        collateral_long: f64,
        coll_rate: f64,
        price: f64,
    ) -> Self {
        let density = LiquidityDensity::linear(price);
        Self {
            asset,
            inventory,
            lp_inventory,
            collateral_long,
            collateral_short: 0.0,
            coll_rate,
            accounting_state: -density.nominal(inventory - lp_inventory),
            local_price: price,
            density,
        }
    }

    pub fn external_price(&self) -> f64 {
        self.density.price
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let finite = [
            self.inventory,
            self.lp_inventory,
            self.collateral_long,
            self.collateral_short,
            self.coll_rate,
            self.accounting_state,
            self.local_price,
            self.density.price,
            self.density.depth_slope,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(format!("pool {}: non-finite field", self.asset));
        }
        if self.inventory < 0.0 || self.lp_inventory < 0.0 {
            return Err(format!("pool {}: negative inventory", self.asset));
        }
        if self.collateral_long < 0.0 || self.collateral_short < 0.0 {
            return Err(format!("pool {}: negative collateral", self.asset));
        }
        if !(self.coll_rate > 0.0 && self.coll_rate <= 1.0) {
            return Err(format!(
                "pool {}: coll_rate {} outside (0, 1]",
                self.asset, self.coll_rate
            ));
        }
        if self.density.price <= 0.0 || self.local_price <= 0.0 || self.density.depth_slope < 0.0 {
            return Err(format!("pool {}: invalid price or depth slope", self.asset));
        }
        Ok(())
    }
}

/// IDA balances and LP-token claims per account.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HoldersLedger {
    pub balances: BTreeMap<String, f64>,
    /// account → asset id → asset-units of LP claim.
    pub lp_tokens: BTreeMap<String, BTreeMap<u32, f64>>,
}

impl HoldersLedger {
    pub fn balance(&self, account: &str) -> f64 {
        self.balances.get(account).copied().unwrap_or(0.0)
    }

    /// Sum of balances in account order.
    pub fn total(&self) -> f64 {
        self.balances.values().sum()
    }

    pub fn credit(&mut self, account: &str, amount: f64) {
        *self.balances.entry(account.to_string()).or_insert(0.0) += amount;
    }

    /// Debits up to the available balance; returns the amount actually debited.
    pub fn debit(&mut self, account: &str, amount: f64) -> f64 {
        let Some(bal) = self.balances.get_mut(account) else {
            return 0.0;
        };
        let taken = amount.min(*bal).max(0.0);
        *bal -= taken;
        if *bal < 0.0 {
            *bal = 0.0;
        }
        taken
    }

    pub fn lp_claim(&self, account: &str, asset: u32) -> f64 {
        self.lp_tokens
            .get(account)
            .and_then(|m| m.get(&asset))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn credit_lp(&mut self, account: &str, asset: u32, units: f64) {
        *self
            .lp_tokens
            .entry(account.to_string())
            .or_default()
            .entry(asset)
            .or_insert(0.0) += units;
    }

    pub fn total_lp(&self, asset: u32) -> f64 {
        self.lp_tokens.values().filter_map(|m| m.get(&asset)).sum()
    }
}

/// Per-pool state of the rebalancing-auction stub.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuctionPoolState {
    /// Consecutive epochs with utilization above target.
    pub epochs_above: u32,
}

/// Whole-system snapshot. Pools are kept sorted by asset id, and every
/// per-pool vector is index-aligned with `pools`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub pools: Vec<PoolState>,
    pub circulating_supply: f64,
    pub treasury: f64,
    pub epoch: u64,
    pub ledger: HoldersLedger,
    pub fee_states: Vec<FeeState>,
    pub pmo_states: Vec<PmoPoolState>,
    #[serde(default)]
    pub auction_states: Vec<AuctionPoolState>,
    pub cs_history: VecDeque<f64>,
    /// Per-pool target utilization U*^i currently in force.
    pub targets: Vec<f64>,
}

impl SystemState {
    /// Builds a system from pools and holders. Pools are sorted by asset id,
    /// circulating supply is taken from the ledger, every pool starts at
    /// `base_target` with a fee memory seeded for that target.
    pub fn new(
        mut pools: Vec<PoolState>,
        ledger: HoldersLedger,
        treasury: f64,
        base_target: f64,
        theta_0: f64,
    ) -> Self {
        pools.sort_by(|a, b| a.asset.cmp(&b.asset));
        let n = pools.len();
        let mut state = Self {
            pools,
            circulating_supply: 0.0,
            treasury,
            epoch: 0,
            ledger,
            fee_states: vec![FeeState::seeded(theta_0, base_target); n],
            pmo_states: vec![PmoPoolState::default(); n],
            auction_states: vec![AuctionPoolState::default(); n],
            cs_history: VecDeque::new(),
            targets: vec![base_target; n],
        };
        state.sync_supply();
        state
    }

    pub fn pool_index(&self, asset: &AssetId) -> Option<usize> {
        self.pools.iter().position(|p| p.asset == *asset)
    }

    pub fn pool_index_by_id(&self, id: u32) -> Option<usize> {
        self.pools.iter().position(|p| p.asset.id == id)
    }

    /// Re-derives `circulating_supply` from the ledger.
    pub fn sync_supply(&mut self) {
        self.circulating_supply = self.ledger.total();
    }

    pub fn push_cs_history(&mut self, window: usize) {
        self.cs_history.push_back(self.circulating_supply);
        while self.cs_history.len() > window.max(1) {
            self.cs_history.pop_front();
        }
    }

    pub fn check_invariants(&self, tolerance: f64) -> Result<(), String> {
        if self.pools.is_empty() {
            return Err("no pools".into());
        }
        let n = self.pools.len();
        if self.fee_states.len() != n
            || self.pmo_states.len() != n
            || self.targets.len() != n
            || self.auction_states.len() != n
        {
            return Err("per-pool state vectors are not aligned with pools".into());
        }
        if self
            .pools
            .windows(2)
            .any(|w| w[0].asset.id >= w[1].asset.id)
        {
            return Err("pools are not sorted by unique asset id".into());
        }
        for p in &self.pools {
            p.check_invariants()?;
        }
        if !self.circulating_supply.is_finite() || self.circulating_supply < 0.0 {
            return Err(format!(
                "circulating supply {} invalid",
                self.circulating_supply
            ));
        }
        if !self.treasury.is_finite() || self.treasury < 0.0 {
            return Err(format!("treasury {} invalid", self.treasury));
        }
        if self
            .ledger
            .balances
            .values()
            .any(|b| *b < 0.0 || !b.is_finite())
        {
            return Err("ledger holds a negative or non-finite balance".into());
        }
        let gap = (self.ledger.total() - self.circulating_supply).abs();
        if gap > tolerance * self.circulating_supply.max(1.0) {
            return Err(format!(
                "ledger sum differs from circulating supply by {gap}"
            ));
        }
        Ok(())
    }
}
