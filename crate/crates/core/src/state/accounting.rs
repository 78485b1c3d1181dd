//! Accounting identities over pool and system snapshots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{PoolState, SystemState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccountingError {
    #[error("pool {0} has no long collateral but a non-zero open inventory")]
    ZeroCollateral(String),
    #[error("no pool has a positive open inventory")]
    NoPositiveOI,
    #[error("circulating supply is zero")]
    ZeroSupply,
    #[error("capital efficiency denominator is not positive")]
    ZeroDenominator,
}

/// Which pools' collateral enters the prorated collateral term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollateralMode {
    /// Collateral of every pool.
    #[default]
    AllPools,
    /// Only pools with a positive open inventory.
    PositiveOnly,
}

/// Inventory held by the pool in excess of what LPs own.
pub fn open_inventory(pool: &PoolState) -> f64 {
    pool.inventory - pool.lp_inventory
}

/// Open inventory over the maximum supportable open inventory `C/ϱ`.
pub fn utilization_rate(pool: &PoolState) -> Result<f64, AccountingError> {
    let oi = open_inventory(pool);
    if pool.collateral_long <= 0.0 {
        if oi == 0.0 {
            return Ok(0.0);
        }
        return Err(AccountingError::ZeroCollateral(pool.asset.symbol.clone()));
    }
    Ok(oi / (pool.collateral_long / pool.coll_rate))
}

/// Positive and negative open-inventory nominals, both reported as magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenInventoryNominals {
    pub positive: f64,
    pub negative: f64,
}

impl OpenInventoryNominals {
    pub fn net(&self) -> f64 {
        self.positive - self.negative
    }
}

pub fn open_inventory_nominals(system: &SystemState) -> OpenInventoryNominals {
    let mut positive = 0.0;
    let mut negative = 0.0;
    for pool in &system.pools {
        let oi = open_inventory(pool);
        if oi > 0.0 {
            positive += pool.density.nominal(oi);
        } else if oi < 0.0 {
            negative += pool.density.nominal(-oi);
        }
    }
    OpenInventoryNominals { positive, negative }
}

/// Nominal open inventory created by IDA issuance: positive minus negative
/// open-inventory nominal.
pub fn circulating_supply_nominal(system: &SystemState) -> f64 {
    open_inventory_nominals(system).net()
}

fn collateral_nominal(system: &SystemState, mode: CollateralMode) -> f64 {
    system
        .pools
        .iter()
        .filter(|p| match mode {
            CollateralMode::AllPools => true,
            CollateralMode::PositiveOnly => open_inventory(p) > 0.0,
        })
        .map(|p| p.density.nominal(p.collateral_long))
        .sum()
}

/// Collateral prorated by the share of positive open inventory that is net.
fn prorated_collateral(system: &SystemState, mode: CollateralMode) -> Result<f64, AccountingError> {
    let oi = open_inventory_nominals(system);
    if oi.positive <= 0.0 {
        return Err(AccountingError::NoPositiveOI);
    }
    Ok(collateral_nominal(system, mode) * (oi.net() / oi.positive))
}

/// Nominal assets attributable to IDA: net open inventory plus the prorated
/// collateral buffer.
pub fn attributable_assets(
    system: &SystemState,
    mode: CollateralMode,
) -> Result<f64, AccountingError> {
    let net = circulating_supply_nominal(system);
    Ok(net + prorated_collateral(system, mode)?)
}

/// Attributable assets per unit of circulating supply.
pub fn coverage_ratio(system: &SystemState, mode: CollateralMode) -> Result<f64, AccountingError> {
    if system.circulating_supply <= 0.0 {
        return Err(AccountingError::ZeroSupply);
    }
    Ok(attributable_assets(system, mode)? / system.circulating_supply)
}

/// Circulating supply per unit of prorated collateral.
pub fn capital_efficiency(
    system: &SystemState,
    mode: CollateralMode,
) -> Result<f64, AccountingError> {
    if system.circulating_supply == 0.0 {
        return Ok(0.0);
    }
    let denom = prorated_collateral(system, mode).map_err(|_| AccountingError::ZeroDenominator)?;
    if denom <= 0.0 {
        return Err(AccountingError::ZeroDenominator);
    }
    Ok(system.circulating_supply / denom)
}

fn efficiency_from_utilizations(
    system: &SystemState,
    mode: CollateralMode,
    util_of: impl Fn(usize, &PoolState) -> Result<f64, AccountingError>,
) -> Result<f64, AccountingError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, p) in system.pools.iter().enumerate() {
        let positive = open_inventory(p) > 0.0;
        if mode == CollateralMode::PositiveOnly && !positive {
            continue;
        }
        let u = util_of(i, p)?;
        if u > 0.0 {
            num += p.density.nominal(u * p.collateral_long / p.coll_rate);
        }
        den += p.density.nominal(p.collateral_long);
    }
    if den <= 0.0 {
        return Err(AccountingError::ZeroDenominator);
    }
    Ok(num / den)
}

/// Steady-state approximation of capital efficiency from realized
/// utilizations: `Σ L(U·C/ϱ) / Σ L(C)` over positive-utilization pools.
pub fn capital_efficiency_approx(
    system: &SystemState,
    mode: CollateralMode,
) -> Result<f64, AccountingError> {
    efficiency_from_utilizations(system, mode, |_, p| utilization_rate(p))
}

/// Same approximation evaluated at the per-pool targets in force.
pub fn capital_efficiency_at_target(
    system: &SystemState,
    mode: CollateralMode,
) -> Result<f64, AccountingError> {
    efficiency_from_utilizations(system, mode, |i, _| Ok(system.targets[i]))
}

/// Corrective inventory flow `ΔI = I − I_LP − U*·C/ϱ` that brings the pool to
/// `target_u`.
pub fn inventory_gap_to_target(pool: &PoolState, target_u: f64) -> f64 {
    open_inventory(pool) - target_u * pool.collateral_long / pool.coll_rate
}

/// Assets minus liabilities in peg-units.
///
/// Assets are pool inventories plus both collateral vaults; liabilities are
/// LP inventories, the collateral owed back to sLPs, and the circulating IDA.
/// The treasury is protocol equity held outside the pools and enters neither
/// side.
pub fn balance_sheet_residual(system: &SystemState) -> f64 {
    let mut assets = 0.0;
    let mut liabilities = 0.0;
    for p in &system.pools {
        let collateral =
            p.density.nominal(p.collateral_long) + p.density.nominal(p.collateral_short);
        assets += p.density.nominal(p.inventory) + collateral;
        liabilities += p.density.nominal(p.lp_inventory) + collateral;
    }
    assets - (liabilities + system.circulating_supply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{AssetId, HoldersLedger};
    use crate::testkit::system_from_pools;

    fn pool(i: f64, lp: f64, c: f64, rate: f64, price: f64) -> PoolState {
        PoolState::new(AssetId::new(0, "X"), i, lp, c, rate, price)
    }

    #[test]
    fn open_inventory_examples() {
        assert_eq!(open_inventory(&pool(120.0, 100.0, 1.0, 1.0, 1.0)), 20.0);
        assert_eq!(open_inventory(&pool(100.0, 100.0, 1.0, 1.0, 1.0)), 0.0);
        assert_eq!(open_inventory(&pool(80.0, 100.0, 1.0, 1.0, 1.0)), -20.0);
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(
            utilization_rate(&pool(120.0, 100.0, 40.0, 0.5, 1.0)).unwrap(),
            0.25
        );
        assert_eq!(
            utilization_rate(&pool(100.0, 100.0, 7.0, 0.3, 1.0)).unwrap(),
            0.0
        );
        assert_eq!(
            utilization_rate(&pool(180.0, 100.0, 40.0, 0.5, 1.0)).unwrap(),
            1.0
        );
        assert!(utilization_rate(&pool(80.0, 100.0, 40.0, 0.5, 1.0)).unwrap() < 0.0);
    }

    #[test]
    fn utilization_without_collateral() {
        assert_eq!(
            utilization_rate(&pool(100.0, 100.0, 0.0, 0.5, 1.0)).unwrap(),
            0.0
        );
        assert!(matches!(
            utilization_rate(&pool(101.0, 100.0, 0.0, 0.5, 1.0)),
            Err(AccountingError::ZeroCollateral(_))
        ));
    }

    #[test]
    fn supply_nominal_examples() {
        let s = system_from_pools(vec![(120.0, 100.0, 0.0, 1.0)], 0.0);
        assert_eq!(circulating_supply_nominal(&s), 20.0);
        let s = system_from_pools(vec![(100.0, 100.0, 5.0, 3.0), (7.0, 7.0, 1.0, 2.0)], 0.0);
        assert_eq!(circulating_supply_nominal(&s), 0.0);
        let s = system_from_pools(vec![(130.0, 100.0, 0.0, 2.0), (90.0, 100.0, 0.0, 1.0)], 0.0);
        assert_eq!(circulating_supply_nominal(&s), 50.0);
    }

    #[test]
    fn attributable_assets_examples() {
        // positive OI nominal 50, collateral nominal 100
        let s = system_from_pools(vec![(150.0, 100.0, 100.0, 1.0)], 50.0);
        assert_eq!(
            attributable_assets(&s, CollateralMode::AllPools).unwrap(),
            150.0
        );
        // net 0 with positive 50
        let s = system_from_pools(
            vec![(150.0, 100.0, 100.0, 1.0), (50.0, 100.0, 0.0, 1.0)],
            0.0,
        );
        assert_eq!(
            attributable_assets(&s, CollateralMode::AllPools).unwrap(),
            0.0
        );
        // positive 60, negative 10, collateral 120
        let s = system_from_pools(
            vec![(160.0, 100.0, 120.0, 1.0), (90.0, 100.0, 0.0, 1.0)],
            50.0,
        );
        assert_eq!(
            attributable_assets(&s, CollateralMode::AllPools).unwrap(),
            150.0
        );
        let s = system_from_pools(vec![(100.0, 100.0, 120.0, 1.0)], 0.0);
        assert_eq!(
            attributable_assets(&s, CollateralMode::AllPools),
            Err(AccountingError::NoPositiveOI)
        );
    }

    #[test]
    fn positive_only_mode_drops_negative_pool_collateral() {
        let s = system_from_pools(
            vec![(160.0, 100.0, 120.0, 1.0), (90.0, 100.0, 60.0, 1.0)],
            50.0,
        );
        let all = attributable_assets(&s, CollateralMode::AllPools).unwrap();
        let pos = attributable_assets(&s, CollateralMode::PositiveOnly).unwrap();
        assert_eq!(all, 50.0 + 180.0 * (50.0 / 60.0));
        assert_eq!(pos, 50.0 + 120.0 * (50.0 / 60.0));
    }

    #[test]
    fn coverage_examples() {
        let s = system_from_pools(vec![(150.0, 100.0, 100.0, 1.0)], 150.0);
        assert_eq!(coverage_ratio(&s, CollateralMode::AllPools).unwrap(), 1.0);
        let s = system_from_pools(vec![(150.0, 100.0, 100.0, 1.0)], 100.0);
        assert_eq!(coverage_ratio(&s, CollateralMode::AllPools).unwrap(), 1.5);
        // A = 25 + 50 = 75
        let s = system_from_pools(vec![(125.0, 100.0, 50.0, 1.0)], 150.0);
        assert_eq!(coverage_ratio(&s, CollateralMode::AllPools).unwrap(), 0.5);
        let s = system_from_pools(vec![(125.0, 100.0, 50.0, 1.0)], 0.0);
        assert_eq!(
            coverage_ratio(&s, CollateralMode::AllPools),
            Err(AccountingError::ZeroSupply)
        );
    }

    #[test]
    fn capital_efficiency_examples() {
        let s = system_from_pools(vec![(150.0, 100.0, 100.0, 1.0)], 50.0);
        assert_eq!(
            capital_efficiency(&s, CollateralMode::AllPools).unwrap(),
            0.5
        );
        let s = system_from_pools(vec![(100.0, 100.0, 100.0, 1.0)], 0.0);
        assert_eq!(
            capital_efficiency(&s, CollateralMode::AllPools).unwrap(),
            0.0
        );
        let s = system_from_pools(vec![(100.0, 100.0, 0.0, 1.0)], 5.0);
        assert_eq!(
            capital_efficiency(&s, CollateralMode::AllPools),
            Err(AccountingError::ZeroDenominator)
        );
    }

    #[test]
    fn efficiency_routes_agree_at_target() {
        // two pools sitting exactly at U* = 0.25 with ϱ = 0.5
        let mut s = system_from_pools(
            vec![(110.0, 100.0, 20.0, 2.0), (130.0, 100.0, 60.0, 1.5)],
            0.0,
        );
        s.circulating_supply = circulating_supply_nominal(&s);
        s.targets = vec![0.25, 0.25];
        for p in &mut s.pools {
            p.coll_rate = 0.5;
        }
        let exact = capital_efficiency(&s, CollateralMode::AllPools).unwrap();
        let approx = capital_efficiency_approx(&s, CollateralMode::AllPools).unwrap();
        let target = capital_efficiency_at_target(&s, CollateralMode::AllPools).unwrap();
        assert!((exact - approx).abs() < 1e-12);
        assert!((exact - target).abs() < 1e-12);
    }

    #[test]
    fn gap_examples() {
        let p = pool(120.0, 100.0, 40.0, 0.5, 1.0);
        assert_eq!(inventory_gap_to_target(&p, 0.25), 0.0);
        assert!((inventory_gap_to_target(&p, 0.2) - 4.0).abs() < 1e-12);
        assert_eq!(inventory_gap_to_target(&p, 0.5), -20.0);
        let mut q = p.clone();
        q.inventory -= inventory_gap_to_target(&p, 0.2);
        assert!((utilization_rate(&q).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn residual_of_fresh_and_shocked_system() {
        let mut s = system_from_pools(vec![(100.0, 100.0, 40.0, 1.0)], 0.0);
        s.ledger = HoldersLedger::default();
        assert_eq!(balance_sheet_residual(&s), 0.0);

        let mut s = system_from_pools(vec![(130.0, 100.0, 40.0, 2.0)], 60.0);
        assert_eq!(balance_sheet_residual(&s), 0.0);
        s.pools[0].density.price = 2.5;
        // revaluation delta = ΔP · OI = 0.5 · 30
        assert!((balance_sheet_residual(&s) - 15.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn utilization_monotone(lp in 1.0..1e4f64, oi in 0.1..1e3f64, d in 0.1..10.0f64,
                                    c in 1.0..1e3f64, dc in 0.1..10.0f64, rate in 0.05..1.0f64) {
                let base = utilization_rate(&pool(lp + oi, lp, c, rate, 1.0)).unwrap();
                let more_inv = utilization_rate(&pool(lp + oi + d, lp, c, rate, 1.0)).unwrap();
                let more_col = utilization_rate(&pool(lp + oi, lp, c + dc, rate, 1.0)).unwrap();
                prop_assert!(more_inv > base);
                prop_assert!(more_col < base);
            }

            #[test]
            fn supply_nominal_is_permutation_invariant(
                pools in proptest::collection::vec((0.0..500.0f64, 0.0..500.0f64, 0.0..50.0f64, 0.1..10.0f64), 1..6),
                rot in 0usize..6,
            ) {
                let a = system_from_pools(pools.clone(), 0.0);
                let mut shuffled = pools.clone();
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
                let b = system_from_pools(shuffled, 0.0);
                let (x, y) = (circulating_supply_nominal(&a), circulating_supply_nominal(&b));
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }

            #[test]
            fn attributable_without_collateral_is_net(
                pools in proptest::collection::vec((1.0..500.0f64, 0.0..400.0f64, 0.1..10.0f64), 1..6),
            ) {
                let pools: Vec<_> = pools.into_iter().map(|(i, lp, p)| (i + lp, i.max(lp) - i + lp.min(i), 0.0, p)).collect();
                let s = system_from_pools(pools, 0.0);
                if let Ok(a) = attributable_assets(&s, CollateralMode::AllPools) {
                    prop_assert_eq!(a, circulating_supply_nominal(&s));
                }
            }

            #[test]
            fn coverage_round_trip(i in 101.0..1e4f64, c in 0.0..1e3f64, cs in 1.0..1e4f64) {
                let s = system_from_pools(vec![(i, 100.0, c, 1.3)], cs);
                let a = attributable_assets(&s, CollateralMode::AllPools).unwrap();
                let r = coverage_ratio(&s, CollateralMode::AllPools).unwrap();
                prop_assert!((r * cs - a).abs() <= 4.0 * f64::EPSILON * a.abs());
            }
        }
    }
}
