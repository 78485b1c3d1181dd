use crate::state::{AssetId, HoldersLedger, PoolState, SystemState};

/// Pools given as `(inventory, lp_inventory, collateral_long, price)` with
/// ϱ = 1; `cs` IDA held by a single account.
pub fn system_from_pools(pools: Vec<(f64, f64, f64, f64)>, cs: f64) -> SystemState {
    let pools = pools
        .into_iter()
        .enumerate()
        .map(|(k, (i, lp, c, price))| {
            PoolState::new(
                AssetId::new(k as u32, format!("P{k}")),
                i,
                lp,
                c,
                1.0,
                price,
            )
        })
        .collect();
    let mut ledger = HoldersLedger::default();
    ledger.credit("holder", cs);
    SystemState::new(pools, ledger, 0.0, 0.5, 0.01)
}
