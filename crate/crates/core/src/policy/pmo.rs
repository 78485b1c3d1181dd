//! Prudential market operations.
//!
//! Each pool runs an independent machine. When utilization reaches the
//! threshold `N` the protocol announces a conversion of a fraction of the
//! circulating supply into the pool's asset, waits `N_h` epochs, and then
//! either executes at the local market price or rescinds if utilization fell
//! back below `N`. At or above `M` it converts immediately at the price
//! implied by the pool's open inventory and accounting state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{open_inventory, AssetId, PoolState, SystemState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PmoError {
    #[error("circulating supply is zero")]
    ZeroSupply,
    #[error("pool {pool}: second-interval pricing needs a negative accounting state and positive open inventory (A={accounting_state}, OI={open_inventory})")]
    InvalidAccountingState {
        pool: String,
        accounting_state: f64,
        open_inventory: f64,
    },
    #[error("unknown pool id {0}")]
    UnknownPool(u32),
    #[error("conversion fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("invalid PMO parameters: {0}")]
    Params(String),
}

/// Functional form of the conversion fraction between `N` and `M`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionVariant {
    #[default]
    Polynomial,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmoParams {
    pub m_threshold: f64,
    pub n_wait_epochs: u32,
    pub t0_rounds: u32,
    pub k_scale: f64,
    #[serde(default)]
    pub variant: ConversionVariant,
    #[serde(default = "default_logistic_a")]
    pub logistic_a: f64,
    #[serde(default = "default_logistic_b")]
    pub logistic_b: f64,
}

fn default_logistic_a() -> f64 {
    1.0
}

fn default_logistic_b() -> f64 {
    3.0
}

impl Default for PmoParams {
    fn default() -> Self {
        Self {
            m_threshold: 0.9,
            n_wait_epochs: 10,
            t0_rounds: 5,
            k_scale: 0.002,
            variant: ConversionVariant::Polynomial,
            logistic_a: default_logistic_a(),
            logistic_b: default_logistic_b(),
        }
    }
}

impl PmoParams {
    pub fn validate(&self) -> Result<(), PmoError> {
        if !(self.m_threshold > 0.0 && self.m_threshold.is_finite()) {
            return Err(PmoError::Params(format!(
                "m_threshold must be positive (got {})",
                self.m_threshold
            )));
        }
        if self.n_wait_epochs < 1 || self.t0_rounds < 1 {
            return Err(PmoError::Params(
                "n_wait_epochs and t0_rounds must be at least 1".into(),
            ));
        }
        if !(self.k_scale > 0.0 && self.k_scale.is_finite()) {
            return Err(PmoError::Params(format!(
                "k_scale must be positive (got {})",
                self.k_scale
            )));
        }
        if !(self.logistic_a.is_finite() && self.logistic_b.is_finite()) {
            return Err(PmoError::Params(
                "logistic coefficients must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pool machine state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PmoPoolState {
    /// PMO rounds opened while utilization stayed at or above `N`.
    pub rounds_above: u32,
    pub pending_since: Option<u64>,
    pub announced_fraction: Option<f64>,
}

impl PmoPoolState {
    pub fn is_pending(&self) -> bool {
        self.pending_since.is_some()
    }

    fn cleared(rounds_above: u32) -> Self {
        Self {
            rounds_above,
            pending_since: None,
            announced_fraction: None,
        }
    }
}

/// Which branch of the conversion schedule applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionRegime {
    /// `N ≤ U < M`: announced conversion at the local market price.
    FirstInterval,
    /// `U ≥ M`: immediate conversion at the inventory-implied price.
    SecondInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionPrice {
    pub regime: ConversionRegime,
    /// Asset-units delivered per IDA converted.
    pub units_per_ida: f64,
    /// Same price quoted as peg-units per asset-unit.
    pub quote: f64,
    /// Local market price at the time of pricing.
    pub local_price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmoActionKind {
    None,
    Announce,
    Rescind,
    Execute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmoAction {
    pub kind: PmoActionKind,
    pub fraction: f64,
    /// Quote-convention price (peg-units per asset-unit); 0 when not priced.
    pub price: f64,
    pub pool: AssetId,
    pub conversion: Option<ConversionPrice>,
}

impl PmoAction {
    fn none(pool: &PoolState) -> Self {
        Self {
            kind: PmoActionKind::None,
            fraction: 0.0,
            price: 0.0,
            pool: pool.asset.clone(),
            conversion: None,
        }
    }
}

/// First-interval conversion fraction `k·(1 + U^e1)·T^e2`, clamped to [0, 1].
pub fn conversion_fraction_poly(util: f64, rounds: u32, params: &PmoParams) -> f64 {
    let t = f64::from(rounds);
    let scaled = t / f64::from(params.t0_rounds);
    let e1 = (scaled.max(1.0) - 1.0).min(1.0);
    let e2 = 1.0 + (scaled - 1.0).max(0.0);
    let h = params.k_scale * (1.0 + util.max(0.0).powf(e1)) * t.powf(e2);
    h.clamp(0.0, 1.0)
}

/// Logistic first-interval fraction `k·U / (1 + e^{−a(T−b)})`, clamped to [0, 1].
pub fn conversion_fraction_logistic(util: f64, rounds: u32, params: &PmoParams) -> f64 {
    let t = f64::from(rounds);
    let h = params.k_scale * util / (1.0 + (-params.logistic_a * (t - params.logistic_b)).exp());
    h.clamp(0.0, 1.0)
}

/// Second-interval fraction `min(−A/CS, 1)`; zero when the pool owes nothing.
pub fn conversion_fraction_saturated(accounting_state: f64, supply: f64) -> Result<f64, PmoError> {
    if supply <= 0.0 {
        return Err(PmoError::ZeroSupply);
    }
    Ok((-accounting_state / supply).clamp(0.0, 1.0))
}

pub fn conversion_fraction(util: f64, rounds: u32, params: &PmoParams) -> f64 {
    match params.variant {
        ConversionVariant::Polynomial => conversion_fraction_poly(util, rounds, params),
        ConversionVariant::Logistic => conversion_fraction_logistic(util, rounds, params),
    }
}

pub fn conversion_price(
    pool: &PoolState,
    regime: ConversionRegime,
) -> Result<ConversionPrice, PmoError> {
    match regime {
        ConversionRegime::FirstInterval => Ok(ConversionPrice {
            regime,
            units_per_ida: 1.0 / pool.local_price,
            quote: pool.local_price,
            local_price: pool.local_price,
        }),
        ConversionRegime::SecondInterval => {
            let oi = open_inventory(pool);
            let owed = -pool.accounting_state;
            if owed <= 0.0 || oi <= 0.0 {
                return Err(PmoError::InvalidAccountingState {
                    pool: pool.asset.symbol.clone(),
                    accounting_state: pool.accounting_state,
                    open_inventory: oi,
                });
            }
            Ok(ConversionPrice {
                regime,
                units_per_ida: oi / owed,
                quote: owed / oi,
                local_price: pool.local_price,
            })
        }
    }
}

/// Advances one pool's machine by one epoch.
///
/// `rounds_above` counts the rounds opened by consecutive announcements and
/// resets whenever utilization is observed below `n_threshold`.
pub fn pmo_step(
    pool_util: f64,
    n_threshold: f64,
    state: PmoPoolState,
    params: &PmoParams,
    epoch: u64,
    pool: &PoolState,
    supply: f64,
) -> (PmoPoolState, PmoAction) {
    if pool_util >= params.m_threshold {
        let next = PmoPoolState::cleared(state.rounds_above);
        let fraction = conversion_fraction_saturated(pool.accounting_state, supply).unwrap_or(0.0);
        return match conversion_price(pool, ConversionRegime::SecondInterval) {
            Ok(price) if fraction > 0.0 => (
                next,
                PmoAction {
                    kind: PmoActionKind::Execute,
                    fraction,
                    price: price.quote,
                    pool: pool.asset.clone(),
                    conversion: Some(price),
                },
            ),
            _ => (next, PmoAction::none(pool)),
        };
    }

    if pool_util < n_threshold {
        let next = PmoPoolState::cleared(0);
        let action = if state.is_pending() {
            PmoAction {
                kind: PmoActionKind::Rescind,
                ..PmoAction::none(pool)
            }
        } else {
            PmoAction::none(pool)
        };
        return (next, action);
    }

    match (state.pending_since, state.announced_fraction) {
        (Some(since), Some(fraction)) => {
            if epoch.saturating_sub(since) >= u64::from(params.n_wait_epochs) {
                let price = conversion_price(pool, ConversionRegime::FirstInterval)
                    .expect("first-interval pricing is total");
                (
                    PmoPoolState::cleared(state.rounds_above),
                    PmoAction {
                        kind: PmoActionKind::Execute,
                        fraction,
                        price: price.quote,
                        pool: pool.asset.clone(),
                        conversion: Some(price),
                    },
                )
            } else {
                (state, PmoAction::none(pool))
            }
        }
        _ => {
            let rounds = state.rounds_above + 1;
            let fraction = conversion_fraction(pool_util, rounds, params);
            (
                PmoPoolState {
                    rounds_above: rounds,
                    pending_since: Some(epoch),
                    announced_fraction: Some(fraction),
                },
                PmoAction {
                    kind: PmoActionKind::Announce,
                    fraction,
                    price: pool.local_price,
                    pool: pool.asset.clone(),
                    conversion: None,
                },
            )
        }
    }
}

/// Outcome of an executed conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReceipt {
    pub pool: AssetId,
    pub requested_fraction: f64,
    pub applied_fraction: f64,
    pub burned_ida: f64,
    pub issued_units: f64,
    pub price: ConversionPrice,
    /// Set when the request exceeded the pool's open inventory and was cut.
    pub truncated: bool,
}

/// Converts `fraction` of every holder's IDA into LP claims on `pool`.
///
/// Balances are scaled by the same factor; burned IDA becomes asset-units at
/// the given price, credited as LP tokens to the same holder and moved from
/// the pool's open inventory into its LP inventory. Requests beyond the
/// available open inventory are truncated.
pub fn execute_conversion(
    system: &SystemState,
    pool: &AssetId,
    fraction: f64,
    price: &ConversionPrice,
) -> Result<(SystemState, ConversionReceipt), PmoError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(PmoError::InvalidFraction(fraction));
    }
    let idx = system
        .pool_index(pool)
        .ok_or(PmoError::UnknownPool(pool.id))?;
    let mut next = system.clone();
    let supply = system.ledger.total();
    let mut receipt = ConversionReceipt {
        pool: pool.clone(),
        requested_fraction: fraction,
        applied_fraction: 0.0,
        burned_ida: 0.0,
        issued_units: 0.0,
        price: *price,
        truncated: false,
    };
    if fraction == 0.0 || supply <= 0.0 {
        return Ok((next, receipt));
    }

    let available = open_inventory(&system.pools[idx]).max(0.0);
    let mut applied = fraction;
    if fraction * supply * price.units_per_ida > available {
        applied = available / price.units_per_ida / supply;
        receipt.truncated = true;
    }
    let keep = 1.0 - applied;

    let mut burned = 0.0;
    let mut issued = 0.0;
    let accounts: Vec<String> = next.ledger.balances.keys().cloned().collect();
    for account in accounts {
        let balance = next.ledger.balances[&account];
        let remaining = balance * keep;
        let taken = balance - remaining;
        if taken <= 0.0 {
            continue;
        }
        let units = taken * price.units_per_ida;
        next.ledger.balances.insert(account.clone(), remaining);
        next.ledger.credit_lp(&account, pool.id, units);
        burned += taken;
        issued += units;
    }

    let p = &mut next.pools[idx];
    p.lp_inventory += issued;
    p.accounting_state += burned;
    next.sync_supply();

    receipt.applied_fraction = applied;
    receipt.burned_ida = burned;
    receipt.issued_units = issued;
    Ok((next, receipt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{balance_sheet_residual, HoldersLedger};
    use proptest::prelude::*;

    fn params() -> PmoParams {
        PmoParams {
            m_threshold: 0.9,
            n_wait_epochs: 3,
            t0_rounds: 10,
            k_scale: 0.001,
            ..PmoParams::default()
        }
    }

    fn pool_with(i: f64, lp: f64, price: f64) -> PoolState {
        PoolState::new(AssetId::new(1, "ETH"), i, lp, 100.0, 1.0, price)
    }

    #[test]
    fn polynomial_examples() {
        let p = params();
        assert!((conversion_fraction_poly(0.9, 5, &p) - 0.01).abs() < 1e-15);
        assert!((conversion_fraction_poly(0.9, 20, &p) - 0.76).abs() < 1e-12);
        assert_eq!(conversion_fraction_poly(0.9, 60, &p), 1.0);
    }

    #[test]
    fn saturated_examples() {
        assert_eq!(conversion_fraction_saturated(-1000.0, 1000.0).unwrap(), 1.0);
        assert!((conversion_fraction_saturated(-300.0, 1000.0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(conversion_fraction_saturated(5.0, 1000.0).unwrap(), 0.0);
        assert_eq!(
            conversion_fraction_saturated(-5.0, 0.0),
            Err(PmoError::ZeroSupply)
        );
    }

    #[test]
    fn logistic_examples() {
        let p = PmoParams {
            k_scale: 0.2,
            logistic_a: 1.3,
            logistic_b: 4.0,
            ..params()
        };
        assert!((conversion_fraction_logistic(0.8, 4, &p) - 0.08).abs() < 1e-15);
        let steep = PmoParams {
            logistic_a: 50.0,
            ..p
        };
        assert!((conversion_fraction_logistic(0.8, 6, &steep) - 0.16).abs() < 1e-12);
        assert_eq!(conversion_fraction_logistic(0.0, 6, &steep), 0.0);
    }

    #[test]
    fn price_examples() {
        let mut pool = pool_with(120.0, 100.0, 2.0);
        let first = conversion_price(&pool, ConversionRegime::FirstInterval).unwrap();
        assert_eq!(first.quote, 2.0);
        pool.accounting_state = -40.0;
        let second = conversion_price(&pool, ConversionRegime::SecondInterval).unwrap();
        assert_eq!(second.units_per_ida, 0.5);
        assert_eq!(second.quote, 2.0);
        pool.accounting_state = 0.0;
        assert!(matches!(
            conversion_price(&pool, ConversionRegime::SecondInterval),
            Err(PmoError::InvalidAccountingState { .. })
        ));
    }

    #[test]
    fn announce_then_rescind() {
        let p = params();
        let pool = pool_with(150.0, 100.0, 1.0);
        let (s, a) = pmo_step(0.6, 0.5, PmoPoolState::default(), &p, 7, &pool, 1000.0);
        assert_eq!(a.kind, PmoActionKind::Announce);
        assert_eq!(s.pending_since, Some(7));
        assert_eq!(s.rounds_above, 1);
        let (s, a) = pmo_step(0.4, 0.5, s, &p, 8, &pool, 1000.0);
        assert_eq!(a.kind, PmoActionKind::Rescind);
        assert_eq!(s, PmoPoolState::default());
    }

    #[test]
    fn announce_wait_execute() {
        let p = params();
        let pool = pool_with(150.0, 100.0, 1.0);
        let (mut s, a) = pmo_step(0.6, 0.5, PmoPoolState::default(), &p, 0, &pool, 1000.0);
        let announced = a.fraction;
        for e in 1..3 {
            let (ns, a) = pmo_step(0.6, 0.5, s, &p, e, &pool, 1000.0);
            assert_eq!(a.kind, PmoActionKind::None);
            s = ns;
        }
        let (s, a) = pmo_step(0.55, 0.5, s, &p, 3, &pool, 1000.0);
        assert_eq!(a.kind, PmoActionKind::Execute);
        assert_eq!(a.fraction, announced);
        assert_eq!(
            a.conversion.unwrap().regime,
            ConversionRegime::FirstInterval
        );
        assert!(!s.is_pending());
        // the next round escalates
        let (s, a) = pmo_step(0.6, 0.5, s, &p, 4, &pool, 1000.0);
        assert_eq!(a.kind, PmoActionKind::Announce);
        assert_eq!(s.rounds_above, 2);
        assert!(a.fraction > announced);
    }

    #[test]
    fn saturation_executes_immediately() {
        let p = params();
        let mut pool = pool_with(200.0, 100.0, 1.0);
        pool.accounting_state = -100.0;
        let pending = PmoPoolState {
            rounds_above: 2,
            pending_since: Some(1),
            announced_fraction: Some(0.1),
        };
        let (s, a) = pmo_step(0.95, 0.5, pending, &p, 2, &pool, 400.0);
        assert_eq!(a.kind, PmoActionKind::Execute);
        assert_eq!(a.fraction, 0.25);
        assert_eq!(
            a.conversion.unwrap().regime,
            ConversionRegime::SecondInterval
        );
        assert!(!s.is_pending());
    }

    fn system(balances: &[(&str, f64)], oi: f64, price: f64) -> SystemState {
        let mut ledger = HoldersLedger::default();
        for (a, b) in balances {
            ledger.credit(a, *b);
        }
        let pool = PoolState::new(
            AssetId::new(1, "ETH"),
            1000.0 + oi,
            1000.0,
            500.0,
            1.0,
            price,
        );
        SystemState::new(vec![pool], ledger, 0.0, 0.5, 0.003)
    }

    #[test]
    fn conversion_pro_rata_example() {
        let s = system(&[("a", 50.0), ("b", 950.0)], 1000.0, 1.0);
        let asset = s.pools[0].asset.clone();
        let price = conversion_price(&s.pools[0], ConversionRegime::FirstInterval).unwrap();
        let (n, r) = execute_conversion(&s, &asset, 0.1, &price).unwrap();
        assert!((r.burned_ida - 100.0).abs() < 1e-12);
        assert!((r.issued_units - 100.0).abs() < 1e-12);
        assert!((n.ledger.balance("a") - 45.0).abs() < 1e-12);
        assert!((n.ledger.lp_claim("a", 1) - 5.0).abs() < 1e-12);
        assert!((n.ledger.total() - 0.9 * s.ledger.total()).abs() < 1e-9);
        assert!((n.pools[0].lp_inventory - 1100.0).abs() < 1e-12);
        assert!((n.pools[0].accounting_state - (-900.0)).abs() < 1e-12);
        assert!(balance_sheet_residual(&n).abs() < 1e-9);

        let (same, r) = execute_conversion(&s, &asset, 0.0, &price).unwrap();
        assert_eq!(same, s);
        assert_eq!(r.burned_ida, 0.0);
    }

    #[test]
    fn conversion_truncates_to_open_inventory() {
        let s = system(&[("a", 1000.0)], 50.0, 1.0);
        let asset = s.pools[0].asset.clone();
        let price = conversion_price(&s.pools[0], ConversionRegime::FirstInterval).unwrap();
        let (n, r) = execute_conversion(&s, &asset, 0.2, &price).unwrap();
        assert!(r.truncated);
        assert!((r.issued_units - 50.0).abs() < 1e-9);
        assert!(crate::state::open_inventory(&n.pools[0]).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn poly_monotone(u in 0.01..1.0f64, du in 0.0..0.5f64, t in 1u32..300, t0 in 1u32..100) {
            let p = PmoParams { t0_rounds: t0, k_scale: 1e-4, ..params() };
            let h = conversion_fraction_poly(u, t, &p);
            prop_assert!(conversion_fraction_poly(u, t + 1, &p) >= h);
            prop_assert!(conversion_fraction_poly((u + du).min(1.0), t, &p) >= h);
        }

        #[test]
        fn conversion_conserves_and_is_fair(
            balances in proptest::collection::vec(0.0..1e4f64, 1..20),
            fraction in 0.0..1.0f64,
            price in 0.1..10.0f64,
        ) {
            let named: Vec<(String, f64)> = balances.iter().enumerate().map(|(k, b)| (format!("h{k:02}"), *b)).collect();
            let refs: Vec<(&str, f64)> = named.iter().map(|(a, b)| (a.as_str(), *b)).collect();
            let s = system(&refs, 1e7, price);
            let asset = s.pools[0].asset.clone();
            let cp = conversion_price(&s.pools[0], ConversionRegime::FirstInterval).unwrap();
            let (n, r) = execute_conversion(&s, &asset, fraction, &cp).unwrap();
            prop_assert!(!r.truncated);
            prop_assert!((r.burned_ida - r.issued_units * cp.quote).abs() <= 1e-9 * r.burned_ida.max(1.0));
            let keep = 1.0 - fraction;
            for (a, b) in &named {
                if *b > 0.0 {
                    let ratio = n.ledger.balance(a) / b;
                    prop_assert!((ratio - keep).abs() <= ulp(keep));
                }
            }
        }
    }

    fn ulp(x: f64) -> f64 {
        let next = f64::from_bits(x.to_bits() + 1);
        next - x
    }
}
