//! One epoch of the simulation.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

use super::agents::{
    apply_trade, choose_pool, hoarder_sells, lever_utilization, realized_volatility,
    rebalancing_auction_stub, slp_collateral, AuctionOutcome, TradeFill,
};
use super::config::{account_name, ScenarioConfig, HOARDER_PREFIX, TRADER_PREFIX};
use super::output::{Event, MetricsRow, PoolMetrics, TradeSource};
use crate::assets::{
    asset_nominals, asset_weights, expected_shortfall, optimize_targets, per_pool_target,
    regime_scaling, simulate_returns, utilization_adjustment, weighted_correlation,
    CorrelationMatrix, OptimizerInputs, TARGET_MARGIN,
};
use crate::market::{stream_rng, ReturnModel};
use crate::policy::fee::{differential_fee, Side};
use crate::policy::lever::{delta_mn, delta_no, supply_variance, threshold_n, velocities};
use crate::policy::pmo::{execute_conversion, pmo_step, PmoActionKind, PmoError};
use crate::state::{
    attributable_assets, balance_sheet_residual, capital_efficiency, coverage_ratio,
    open_inventory, SystemState,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("PMO: {0}")]
    Pmo(#[from] PmoError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

const AGENT_STREAM_BASE: u64 = 2 << 32;
const OPTIMIZER_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Running totals carried across epochs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cumulative {
    pub converted_ida: f64,
    /// Net IDA flow (minted minus burned by trades) into pools that were
    /// above their target at quote time.
    pub flow_over: f64,
    /// Same for pools at or below target.
    pub flow_under: f64,
    pub pool_flow: Vec<f64>,
    /// Residual explained by price moves and by conversions whose price
    /// differs from the market.
    pub expected_residual: f64,
    pub conversions: u64,
    pub aborted_epochs: u64,
}

/// Checks gathered while stepping, consumed by the validation suite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvariantLog {
    pub max_adjusted_residual: f64,
    pub max_raw_residual: f64,
    pub fees_out_of_bounds: u64,
    pub max_conversion_gap: f64,
    pub ordering_violations: u64,
    pub delta_violations: u64,
    pub es_oracle_mismatches: u64,
    pub trades: u64,
}

/// Harness state: the system snapshot plus what the harness remembers
/// between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub system: SystemState,
    /// Realized log-returns, oldest first.
    pub returns: VecDeque<Vec<f64>>,
    /// Collateral levels sLPs revert toward.
    pub base_collateral: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub cum: Cumulative,
    pub checks: InvariantLog,
}

impl SimState {
    pub fn new(system: SystemState) -> Self {
        let n = system.pools.len();
        let base_collateral = system.pools.iter().map(|p| p.collateral_long).collect();
        Self {
            system,
            returns: VecDeque::new(),
            base_collateral,
            thresholds: vec![f64::NAN; n],
            cum: Cumulative {
                pool_flow: vec![0.0; n],
                ..Cumulative::default()
            },
            checks: InvariantLog::default(),
        }
    }
}

/// Immutable inputs shared by every epoch of a run.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub config: ScenarioConfig,
    pub model: ReturnModel,
    /// External prices in system order, `horizon + 1` rows.
    pub prices: Vec<Vec<f64>>,
    pub injected_corr: Option<CorrelationMatrix>,
    pub script: BTreeMap<u64, Vec<(usize, Side, f64, String)>>,
    pub symbols: Vec<String>,
}

pub struct EpochOutcome {
    pub state: SimState,
    pub events: Vec<Event>,
    pub row: MetricsRow,
}

struct Scratch {
    volume: Vec<f64>,
    net_flow: Vec<f64>,
    pmo: Vec<PmoActionKind>,
    events: Vec<Event>,
}

impl Scratch {
    fn record_trade(
        &mut self,
        st: &mut SimState,
        epoch: u64,
        idx: usize,
        account: &str,
        source: TradeSource,
        fill: TradeFill,
        ctx: &SimContext,
    ) {
        let fee = &ctx.config.policy.fee;
        if !(fill.fee >= fee.theta_floor && fill.fee <= fee.theta_cap) {
            st.checks.fees_out_of_bounds += 1;
        }
        st.checks.trades += 1;
        self.volume[idx] += fill.gross;
        self.net_flow[idx] += fill.ida;
        st.cum.pool_flow[idx] += fill.ida;
        if fill.util_before > fill.target {
            st.cum.flow_over += fill.ida;
        } else {
            st.cum.flow_under += fill.ida;
        }
        self.events.push(Event::Trade {
            epoch,
            pool: ctx.symbols[idx].clone(),
            account: account.to_string(),
            source,
            side: fill.side,
            gross: fill.gross,
            fee: fill.fee,
            fee_case: fill.fee_case,
            ida: fill.ida,
            util_before: fill.util_before,
            target: fill.target,
        });
    }
}

fn warn(events: &mut Vec<Event>, epoch: u64, message: String) {
    log::info!("epoch {epoch}: {message}");
    events.push(Event::Warning { epoch, message });
}

/// Historical ES of the current asset base over the realized return window.
fn current_es(system: &SystemState, returns: &VecDeque<Vec<f64>>, alpha: f64) -> (f64, Vec<f64>) {
    if returns.len() < 2 {
        return (0.0, Vec::new());
    }
    let exposure = asset_nominals(system);
    let losses: Vec<f64> = returns
        .iter()
        .map(|r| {
            -r.iter()
                .zip(&exposure)
                .map(|(x, a)| a * x.exp_m1())
                .sum::<f64>()
        })
        .collect();
    let es = expected_shortfall(&losses, alpha)
        .map(|e| e.es)
        .unwrap_or(0.0);
    (es, losses)
}

/// Advances the harness by one epoch. On error the input state is left as
/// it was; nothing is partially applied.
pub fn step_epoch(prev: &SimState, ctx: &SimContext) -> Result<EpochOutcome, SimError> {
    let cfg = &ctx.config;
    let policy = &cfg.policy;
    let mut st = prev.clone();
    let epoch = st.system.epoch;
    let n = st.system.pools.len();
    let mut rng = stream_rng(cfg.seed, AGENT_STREAM_BASE + epoch);
    let mut sc = Scratch {
        volume: vec![0.0; n],
        net_flow: vec![0.0; n],
        pmo: vec![PmoActionKind::None; n],
        events: Vec::new(),
    };

    // (1) external prices
    let row = (epoch as usize + 1).min(ctx.prices.len() - 1);
    let mut log_returns = vec![0.0; n];
    for (i, pool) in st.system.pools.iter_mut().enumerate() {
        let old = pool.density;
        let new_price = ctx.prices[row][i];
        let oi = open_inventory(pool);
        pool.density.price = new_price;
        pool.local_price = new_price;
        st.cum.expected_residual += pool.density.nominal(oi) - old.nominal(oi);
        log_returns[i] = (new_price / old.price).ln();
    }
    st.returns.push_back(log_returns);
    while st.returns.len() > policy.return_window {
        st.returns.pop_front();
    }

    // (2) trader flow
    let gated: Vec<bool> = (0..n)
        .map(|i| {
            cfg.auction.enabled
                && cfg.auction.gate_ida_trades
                && st.system.auction_states[i].epochs_above >= cfg.auction.trigger_epochs
        })
        .collect();
    if let Some(script) = ctx.script.get(&epoch) {
        for (idx, side, nominal, account) in script {
            if let Some(fill) = apply_trade(
                &mut st.system,
                *idx,
                *side,
                *nominal,
                account,
                &policy.fee,
                policy.treasury_fee_share,
            ) {
                sc.record_trade(
                    &mut st,
                    epoch,
                    *idx,
                    account,
                    TradeSource::Script,
                    fill,
                    ctx,
                );
            }
        }
    }
    let traders = &cfg.agents.traders;
    if traders.trades_per_epoch > 0.0 && traders.accounts > 0 {
        let count = Poisson::new(traders.trades_per_epoch)
            .map(|p| p.sample(&mut rng))
            .unwrap_or(0.0) as u64;
        for _ in 0..count {
            let side = if rng.random::<f64>() < traders.p_buy {
                Side::Buy
            } else {
                Side::Sell
            };
            let account = account_name(TRADER_PREFIX, rng.random_range(0..traders.accounts));
            let z: f64 = StandardNormal.sample(&mut rng);
            let size = traders.mean_size * (traders.size_sigma * z).exp();
            let quotes: Vec<Option<f64>> = (0..n)
                .map(|i| {
                    if gated[i] {
                        return None;
                    }
                    let u = lever_utilization(&st.system.pools[i]);
                    Some(
                        differential_fee(
                            u,
                            side,
                            st.system.targets[i],
                            st.system.fee_states[i],
                            &policy.fee,
                        )
                        .fee,
                    )
                })
                .collect();
            let Some(idx) = choose_pool(&quotes, traders.fee_elasticity, &mut rng) else {
                continue;
            };
            if let Some(fill) = apply_trade(
                &mut st.system,
                idx,
                side,
                size,
                &account,
                &policy.fee,
                policy.treasury_fee_share,
            ) {
                sc.record_trade(
                    &mut st,
                    epoch,
                    idx,
                    &account,
                    TradeSource::Trader,
                    fill,
                    ctx,
                );
            }
        }
    }

    // (3) hoarders facing a pending announcement
    let hoarders = &cfg.agents.hoarders;
    if hoarders.population > 0 {
        let announced: Vec<(usize, f64)> = (0..n)
            .filter_map(|i| st.system.pmo_states[i].announced_fraction.map(|h| (i, h)))
            .collect();
        if let Some(&(idx, h)) = announced.first() {
            for k in 0..hoarders.population {
                let account = account_name(HOARDER_PREFIX, k);
                let balance = st.system.ledger.balance(&account);
                if balance <= 0.0 || !hoarder_sells(hoarders, k, h) {
                    continue;
                }
                if let Some(fill) = apply_trade(
                    &mut st.system,
                    idx,
                    Side::Sell,
                    balance,
                    &account,
                    &policy.fee,
                    policy.treasury_fee_share,
                ) {
                    sc.record_trade(
                        &mut st,
                        epoch,
                        idx,
                        &account,
                        TradeSource::Hoarder,
                        fill,
                        ctx,
                    );
                }
            }
        }
    }

    // (4) secondary and primary LPs
    let slps = &cfg.agents.slps;
    let plp_scale = cfg.agents.plps.flow_scale;
    for i in 0..n {
        let vol = realized_volatility(&st.returns, i, slps.vol_window);
        let pool = &mut st.system.pools[i];
        pool.collateral_long = slp_collateral(
            pool.collateral_long,
            st.base_collateral[i],
            vol,
            slps,
            &mut rng,
        );
        if plp_scale > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let d = (plp_scale * pool.lp_inventory * z)
                .max(-pool.lp_inventory)
                .max(-pool.inventory);
            pool.inventory += d;
            pool.lp_inventory += d;
        }
    }

    // (5) thresholds
    st.system.push_cs_history(policy.lever.variance_window);
    let history: Vec<f64> = st.system.cs_history.iter().copied().collect();
    let psi = supply_variance(&history).unwrap_or(0.0);
    let assets_total = attributable_assets(&st.system, policy.collateral_mode).unwrap_or(0.0);
    let tr_norm = if assets_total > 0.0 {
        st.system.treasury / assets_total
    } else {
        0.0
    };
    let d_no = delta_no(psi, &policy.lever);
    let d_mn = delta_mn(tr_norm, &policy.lever);
    let lev = &policy.lever;
    if !(lev.delta_no_min..=lev.delta_no_max).contains(&d_no)
        || !(lev.delta_mn_min..=lev.delta_mn_max).contains(&d_mn)
    {
        st.checks.delta_violations += 1;
    }
    let m = policy.pmo.m_threshold;
    for i in 0..n {
        let o = st.system.targets[i];
        let reading = threshold_n(m, o, d_no, d_mn, lev);
        if !(o <= reading.value && reading.value <= m) {
            st.checks.ordering_violations += 1;
        }
        st.thresholds[i] = reading.value;
    }
    // Targets the thresholds were set against; a refresh later this epoch
    // only takes effect next epoch.
    let epoch_targets = st.system.targets.clone();

    // (6) prudential market operations
    for i in 0..n {
        let util = lever_utilization(&st.system.pools[i]);
        let supply = st.system.circulating_supply;
        let (next, action) = pmo_step(
            util,
            st.thresholds[i],
            st.system.pmo_states[i],
            &policy.pmo,
            epoch,
            &st.system.pools[i],
            supply,
        );
        st.system.pmo_states[i] = next;
        sc.pmo[i] = action.kind;
        if action.kind == PmoActionKind::None {
            continue;
        }
        sc.events.push(Event::Pmo {
            epoch,
            pool: ctx.symbols[i].clone(),
            action: action.kind,
            fraction: action.fraction,
            price: action.price,
            util,
            n_threshold: st.thresholds[i],
        });
        if let (PmoActionKind::Execute, Some(price)) = (action.kind, action.conversion) {
            let pool = &st.system.pools[i];
            let before = pool.density.nominal(open_inventory(pool));
            let asset = pool.asset.clone();
            let (next_system, receipt) =
                execute_conversion(&st.system, &asset, action.fraction, &price)?;
            st.system = next_system;
            let pool = &st.system.pools[i];
            let released = before - pool.density.nominal(open_inventory(pool));
            st.cum.expected_residual += receipt.burned_ida - released;
            st.cum.converted_ida += receipt.burned_ida;
            st.cum.conversions += 1;
            let gap = (receipt.burned_ida - receipt.issued_units / price.units_per_ida).abs();
            st.checks.max_conversion_gap = st
                .checks
                .max_conversion_gap
                .max(gap / receipt.burned_ida.max(1.0));
            sc.events.push(Event::Conversion {
                epoch,
                pool: ctx.symbols[i].clone(),
                regime: price.regime,
                requested_fraction: receipt.requested_fraction,
                applied_fraction: receipt.applied_fraction,
                burned_ida: receipt.burned_ida,
                issued_units: receipt.issued_units,
                units_per_ida: price.units_per_ida,
                truncated: receipt.truncated,
            });
        }
    }

    // (7) rebalancing auction
    if cfg.auction.enabled {
        for i in 0..n {
            let util = lever_utilization(&st.system.pools[i]);
            let target = st.system.targets[i];
            let above = &mut st.system.auction_states[i].epochs_above;
            *above = if util > target {
                above.saturating_add(1)
            } else {
                0
            };
            let epochs_above = *above;
            if epochs_above < cfg.auction.trigger_epochs {
                continue;
            }
            let counter = (0..n).filter(|j| *j != i).min_by(|a, b| {
                lever_utilization(&st.system.pools[*a])
                    .total_cmp(&lever_utilization(&st.system.pools[*b]))
                    .then(a.cmp(b))
            });
            let Some(j) = counter else {
                warn(
                    &mut sc.events,
                    epoch,
                    format!("auction for {} skipped: no counter pool", ctx.symbols[i]),
                );
                continue;
            };
            match rebalancing_auction_stub(
                &st.system.pools[i],
                st.system.treasury,
                target,
                epochs_above,
                &cfg.auction,
            ) {
                AuctionOutcome::NoOp => {}
                AuctionOutcome::Warning(msg) => warn(&mut sc.events, epoch, msg),
                AuctionOutcome::Filled {
                    pool,
                    treasury,
                    fill,
                } => {
                    st.system.pools[i] = pool;
                    st.system.treasury = treasury;
                    let cp = &mut st.system.pools[j];
                    cp.inventory += fill.nominal / cp.density.price;
                    cp.accounting_state -= fill.nominal;
                    sc.events.push(Event::Auction {
                        epoch,
                        pool: ctx.symbols[i].clone(),
                        counter_pool: ctx.symbols[j].clone(),
                        units: fill.units,
                        nominal: fill.nominal,
                        premium: fill.premium,
                    });
                }
            }
        }
    }

    // (8) target refresh
    let (es_now, losses) = current_es(&st.system, &st.returns, policy.es.alpha_conf);
    if !losses.is_empty()
        && super::validate::brute_force_es(&losses, policy.es.alpha_conf) != es_now
    {
        st.checks.es_oracle_mismatches += 1;
    }
    let r = policy.target_refresh_epochs;
    if r > 0 && (epoch + 1) % r == 0 {
        refresh_targets(
            &mut st,
            ctx,
            epoch,
            es_now,
            assets_total,
            d_no,
            d_mn,
            &mut sc.events,
        );
    }

    // (9) metrics
    st.system.epoch += 1;
    let residual = balance_sheet_residual(&st.system);
    st.checks.max_raw_residual = st.checks.max_raw_residual.max(residual.abs());
    st.checks.max_adjusted_residual = st
        .checks
        .max_adjusted_residual
        .max((residual - st.cum.expected_residual).abs());
    st.system
        .check_invariants(cfg.tolerance)
        .map_err(SimError::Invariant)?;

    let supply = st.system.circulating_supply;
    let vel = if supply > 0.0 {
        velocities(&sc.volume, supply).ok()
    } else {
        None
    };
    let pools = (0..n)
        .map(|i| {
            let p = &st.system.pools[i];
            PoolMetrics {
                price: p.density.price,
                util: lever_utilization(p),
                fee: st.system.fee_states[i].prev_fee,
                collateral: p.collateral_long,
                open_inventory: open_inventory(p),
                target: epoch_targets[i],
                n_threshold: st.thresholds[i],
                velocity: vel.as_ref().map_or(0.0, |v| v[i].absolute),
                net_flow: sc.net_flow[i],
                pmo: sc.pmo[i],
            }
        })
        .collect();
    let row = MetricsRow {
        epoch,
        circulating_supply: supply,
        treasury: st.system.treasury,
        coverage: coverage_ratio(&st.system, policy.collateral_mode).unwrap_or(f64::NAN),
        capital_efficiency: capital_efficiency(&st.system, policy.collateral_mode)
            .unwrap_or(f64::NAN),
        es: es_now,
        psi,
        delta_no: d_no,
        delta_mn: d_mn,
        residual,
        converted_ida: st.cum.converted_ida,
        aborted: false,
        pools,
    };
    Ok(EpochOutcome {
        state: st,
        events: sc.events,
        row,
    })
}

#[allow(clippy::too_many_arguments)]
fn refresh_targets(
    st: &mut SimState,
    ctx: &SimContext,
    epoch: u64,
    es_now: f64,
    assets_total: f64,
    d_no: f64,
    d_mn: f64,
    events: &mut Vec<Event>,
) {
    let policy = &ctx.config.policy;
    let n = st.system.pools.len();
    let window: Vec<Vec<f64>> = st.returns.iter().cloned().collect();
    let corr = ctx
        .injected_corr
        .clone()
        .unwrap_or_else(|| CorrelationMatrix::from_returns(&window, n));
    let collaterals: Vec<f64> = st.system.pools.iter().map(|p| p.collateral_long).collect();
    let weights = asset_weights(&st.system).unwrap_or_else(|_| vec![0.0; n]);
    let scale = if assets_total > 0.0 {
        regime_scaling(es_now / assets_total, &policy.regime)
    } else {
        1.0
    };
    let du: Vec<f64> = (0..n)
        .map(|i| {
            let rho = weighted_correlation(i, &corr, &collaterals).unwrap_or(0.0);
            scale * utilization_adjustment(rho, weights[i], &policy.correlation)
        })
        .collect();
    let mut targets: Vec<f64> = du
        .iter()
        .map(|d| per_pool_target(policy.base_target, *d))
        .collect();
    let (mut objective, mut es, mut feasible) = (None, None, None);

    if policy.optimizer_enabled {
        let seed = ctx.config.seed ^ OPTIMIZER_SEED_SALT.wrapping_mul(epoch + 1);
        let scenarios =
            simulate_returns(&ctx.model, policy.es.sample_count, policy.es.horizon, seed);
        let inputs = OptimizerInputs {
            system: &st.system,
            base_target: policy.base_target,
            scenarios: &scenarios,
            es: &policy.es,
            pmo: &policy.pmo,
            lever: &policy.lever,
            delta_no: d_no,
            delta_mn: d_mn,
        };
        match optimize_targets(&inputs, &policy.optimizer) {
            Some(best) => {
                if !best.feasible {
                    warn(events, epoch, format!("optimizer found no plan with ES below the cap; using minimum-ES plan (ES {})", best.es.es));
                }
                targets.clone_from(&best.plan.per_pool_targets);
                st.base_collateral.clone_from(&best.plan.collateral_targets);
                objective = Some(best.objective);
                es = Some(best.es.es);
                feasible = Some(best.feasible);
            }
            None => warn(
                events,
                epoch,
                "optimizer grid has no admissible plan; targets unchanged by optimizer".into(),
            ),
        }
    }
    let ceiling = policy.pmo.m_threshold - TARGET_MARGIN;
    for (k, t) in targets.iter_mut().enumerate() {
        if *t > ceiling {
            warn(
                events,
                epoch,
                format!(
                    "target {t} for {} capped below M at {ceiling}",
                    ctx.symbols[k]
                ),
            );
            *t = ceiling;
        }
    }
    st.system.targets.clone_from(&targets);
    events.push(Event::TargetRefresh {
        epoch,
        targets,
        du,
        regime_scale: scale,
        optimizer_objective: objective,
        optimizer_es: es,
        optimizer_feasible: feasible,
    });
}
