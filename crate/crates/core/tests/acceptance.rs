//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ida_core::assets::{
    evaluate_plan, expected_shortfall, optimize_targets, portfolio_variance, simulate_returns,
    utilization_adjustment, weighted_correlation, CorrAdjustParams, CorrelationMatrix, EsParams,
    Gain, OptimizerConfig, OptimizerInputs, PlanEvaluation, SearchStrategy,
};
use ida_core::market::{AssetDynamics, ReturnModel};
use ida_core::policy::fee::{differential_fee, FeeCase, FeeParams, FeeState, Side};
use ida_core::policy::lever::{delta_mn, delta_no, threshold_n, LeverMode, LeverParams};
use ida_core::policy::pmo::{
    conversion_fraction_logistic, conversion_fraction_poly, execute_conversion, pmo_step,
    ConversionVariant, PmoActionKind, PmoParams,
};
use ida_core::sim::agents::{apply_trade, lever_utilization};
use ida_core::sim::{
    read_config_value, resolve, run_scenario, run_sweep, Event, GridAxis, RunOutput,
    ScenarioConfig, SimContext,
};
use ida_core::state::{
    attributable_assets, capital_efficiency, coverage_ratio, utilization_rate, AssetId,
    CollateralMode, HoldersLedger, PoolState, SystemState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn within_budget(v: Verdict, started: Instant, budget: Duration) -> Verdict {
    let took = started.elapsed();
    let ok = v.ok && took < budget;
    let mut detail = v.detail;
    if took >= budget {
        detail.push_str(&format!("; over time budget {budget:?}"));
    }
    Verdict { ok, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn context_from_toml(text: &str) -> SimContext {
    let value: toml::Value = toml::from_str(text).expect("scenario toml");
    let config = resolve(value, &[]).expect("scenario config");
    SimContext::new(config, &scenario_dir()).expect("scenario context")
}

// ---------------------------------------------------------------------------
// Threshold audit shared by every harness run in the suite.

#[derive(Default)]
struct OrderingAudit {
    runs: u64,
    rows: u64,
    ordering: u64,
    deltas: u64,
}

static AUDIT: Mutex<OrderingAudit> = Mutex::new(OrderingAudit {
    runs: 0,
    rows: 0,
    ordering: 0,
    deltas: 0,
});

fn audit(config: &ScenarioConfig, run: &RunOutput) {
    let m = config.policy.pmo.m_threshold;
    let lev = &config.policy.lever;
    let mut a = AUDIT.lock().unwrap();
    a.runs += 1;
    for row in &run.rows {
        a.rows += 1;
        if row
            .pools
            .iter()
            .any(|p| !(p.target <= p.n_threshold && p.n_threshold <= m))
        {
            a.ordering += 1;
        }
        let no_ok = lev.delta_no_min <= row.delta_no && row.delta_no <= lev.delta_no_max;
        let mn_ok = lev.delta_mn_min <= row.delta_mn && row.delta_mn <= lev.delta_mn_max;
        if !(no_ok && mn_ok) {
            a.deltas += 1;
        }
    }
    a.ordering += run.checks.ordering_violations;
    a.deltas += run.checks.delta_violations;
}

fn run_audited(ctx: &SimContext) -> RunOutput {
    let run = run_scenario(ctx);
    audit(&ctx.config, &run);
    run
}

// ---------------------------------------------------------------------------
// 1. Formula fidelity

const SAMPLES: usize = 64;
const FORMULA_TOL: f64 = 1e-12;

fn random_system(r: &mut ChaCha8Rng) -> SystemState {
    loop {
        let n = r.random_range(2..=6);
        let pools: Vec<PoolState> = (0..n)
            .map(|k| {
                let lp = r.random_range(0.0..2000.0);
                let inventory = if k == 0 {
                    lp + r.random_range(1.0..2000.0)
                } else {
                    r.random_range(0.0..2000.0)
                };
                PoolState::new(
                    AssetId::new(k as u32, format!("P{k}")),
                    inventory,
                    lp,
                    r.random_range(10.0..1000.0),
                    r.random_range(0.2..1.0),
                    r.random_range(0.1..100.0),
                )
            })
            .collect();
        let mut ledger = HoldersLedger::default();
        ledger.credit("h", r.random_range(100.0..10000.0));
        let s = SystemState::new(pools, ledger, 0.0, 0.5, 0.003);
        let net: f64 = s
            .pools
            .iter()
            .map(|p| p.density.price * (p.inventory - p.lp_inventory))
            .sum();
        if net > 0.0 {
            return s;
        }
    }
}

/// Attributable assets written out with explicit positive and negative sums.
fn attribution_reference(s: &SystemState, positive_only: bool) -> (f64, f64) {
    let mut pos = 0.0;
    let mut neg = 0.0;
    let mut coll = 0.0;
    for p in &s.pools {
        let oi = p.inventory - p.lp_inventory;
        if oi > 0.0 {
            pos += p.density.price * oi;
        } else if oi < 0.0 {
            neg += p.density.price * (p.lp_inventory - p.inventory);
        }
        if !positive_only || oi > 0.0 {
            coll += p.density.price * p.collateral_long;
        }
    }
    let net = pos - neg;
    let buffer = coll * (net / pos);
    (net + buffer, buffer)
}

fn fee_reference(
    util: f64,
    side: Side,
    target: f64,
    prev_fee: f64,
    prev_util: f64,
    p: &FeeParams,
) -> f64 {
    let (t0, fl, d) = (p.theta_0, p.theta_floor, p.d_impact);
    let raw = if util <= 0.0 {
        t0
    } else {
        match side {
            Side::Buy if target >= util => t0 - (t0 - fl) * (util / target),
            Side::Buy => fl * (1.0 + d * (util / target)),
            Side::Sell if target < util => {
                let f = prev_fee - (prev_fee - fl) * (1.0 - (util - target) / (prev_util - target));
                if f > prev_fee {
                    prev_fee
                } else {
                    f
                }
            }
            Side::Sell => fl + (t0 - fl) * (1.0 - util / target),
        }
    };
    raw.max(fl).min(p.theta_cap)
}

fn h_poly_reference(u: f64, t: u32, t0: u32, k: f64) -> f64 {
    let t = t as f64;
    let ratio = t / t0 as f64;
    let e_u = f64::min(f64::max(ratio, 1.0) - 1.0, 1.0);
    let e_t = 1.0 + f64::max(ratio - 1.0, 0.0);
    (k * (1.0 + u.powf(e_u)) * t.powf(e_t)).clamp(0.0, 1.0)
}

fn random_correlation(r: &mut ChaCha8Rng, n: usize) -> CorrelationMatrix {
    let factors: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n + 2).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = dot(&factors[i], &factors[j])
                / (dot(&factors[i], &factors[i]) * dot(&factors[j], &factors[j])).sqrt();
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    CorrelationMatrix::new(m).expect("gram matrix is a valid correlation")
}

fn criterion_formulas() -> Verdict {
    let started = Instant::now();
    let mut r = rng(101);
    let mut failures: Vec<String> = Vec::new();
    macro_rules! fail {
        ($name:expr, $got:expr, $want:expr $(,)?) => {{
            let (got, want): (f64, f64) = ($got, $want);
            if !rel_close(got, want, FORMULA_TOL) {
                failures.push(format!("{}: got {got}, want {want}", $name));
            }
        }};
    }

    for _ in 0..SAMPLES {
        let s = random_system(&mut r);
        for p in &s.pools {
            let want = (p.inventory - p.lp_inventory) / (p.collateral_long / p.coll_rate);
            fail!("utilization", utilization_rate(p).unwrap(), want);
        }
        for (mode, positive_only) in [
            (CollateralMode::AllPools, false),
            (CollateralMode::PositiveOnly, true),
        ] {
            let (assets, buffer) = attribution_reference(&s, positive_only);
            fail!(
                "attribution",
                attributable_assets(&s, mode).unwrap(),
                assets
            );
            fail!(
                "coverage",
                coverage_ratio(&s, mode).unwrap(),
                assets / s.circulating_supply,
            );
            if buffer > 0.0 {
                fail!(
                    "capital_efficiency",
                    capital_efficiency(&s, mode).unwrap(),
                    s.circulating_supply / buffer,
                );
            }
        }
    }

    let cases = [
        (Side::Buy, true, FeeCase::BuyBelowTarget),
        (Side::Buy, false, FeeCase::BuyAboveTarget),
        (Side::Sell, false, FeeCase::SellAboveTarget),
        (Side::Sell, true, FeeCase::SellBelowTarget),
    ];
    for (side, below, case) in cases {
        for _ in 0..SAMPLES {
            let theta_0 = r.random_range(0.001..0.02);
            let params = FeeParams {
                theta_0,
                theta_floor: theta_0 * r.random_range(0.05..0.95),
                d_impact: r.random_range(0.0..10.0),
                theta_cap: r.random_range(0.05..1.0),
            };
            let target = r.random_range(0.2..0.8);
            let util = if below {
                r.random_range(0.001..target)
            } else {
                r.random_range(target + 1e-3..1.2)
            };
            let prev_util = if r.random_bool(0.8) {
                util + r.random_range(0.0..0.5)
            } else {
                target + r.random_range(0.01..0.5)
            };
            let prev_fee = r.random_range(params.theta_floor..3.0 * theta_0);
            let state = FeeState {
                prev_fee,
                prev_util,
            };
            let quote = differential_fee(util, side, target, state, &params);
            if quote.case != case {
                failures.push(format!("fee case {:?} != {case:?}", quote.case));
            }
            fail!(
                "fee",
                quote.fee,
                fee_reference(util, side, target, prev_fee, prev_util, &params),
            );
        }
    }

    for _ in 0..SAMPLES {
        let params = PmoParams {
            t0_rounds: r.random_range(1..10),
            k_scale: r.random_range(1e-4..0.05),
            logistic_a: r.random_range(0.1..3.0),
            logistic_b: r.random_range(0.0..10.0),
            ..PmoParams::default()
        };
        let u = r.random_range(0.0..1.0);
        let t = r.random_range(1..20);
        fail!(
            "H polynomial",
            conversion_fraction_poly(u, t, &params),
            h_poly_reference(u, t, params.t0_rounds, params.k_scale),
        );
        let logistic = params.k_scale * u
            / (1.0 + (-params.logistic_a * (t as f64 - params.logistic_b)).exp());
        fail!(
            "H logistic",
            conversion_fraction_logistic(u, t, &params),
            logistic.clamp(0.0, 1.0),
        );
    }

    for _ in 0..SAMPLES {
        let lo_no = r.random_range(0.0..0.1);
        let lo_mn = r.random_range(0.0..0.1);
        let lev = LeverParams {
            delta_no_min: lo_no,
            delta_no_max: lo_no + r.random_range(0.0..0.2),
            delta_mn_min: lo_mn,
            delta_mn_max: lo_mn + r.random_range(0.0..0.2),
            l_gain: r.random_range(0.0..100.0),
            k_exp: r.random_range(0.5..2.0),
            j_gain: r.random_range(0.0..5.0),
            d_exp: r.random_range(0.5..2.0),
            beta_blend: r.random_range(0.0..1.0),
            ..LeverParams::default()
        };
        let psi: f64 = r.random_range(0.0..0.01);
        let tr: f64 = r.random_range(0.0..0.5);
        let want_no = f64::min(
            (lev.delta_no_max - lev.delta_no_min) * lev.l_gain * psi.powf(lev.k_exp)
                + lev.delta_no_min,
            lev.delta_no_max,
        );
        let want_mn = f64::max(
            lev.delta_mn_max
                - (lev.delta_mn_max - lev.delta_mn_min) * lev.j_gain * tr.powf(lev.d_exp),
            lev.delta_mn_min,
        );
        let d_no = delta_no(psi, &lev);
        let d_mn = delta_mn(tr, &lev);
        fail!("delta_no", d_no, want_no);
        fail!("delta_mn", d_mn, want_mn);

        let m = r.random_range(0.7..0.95);
        let o = r.random_range(0.2..0.6);
        for mode in [LeverMode::Verbatim, LeverMode::Distance] {
            let lev = LeverParams { mode, ..lev };
            let leg = match mode {
                LeverMode::Verbatim => m - o - d_no,
                LeverMode::Distance => o + d_no,
            };
            let blend = lev.beta_blend * leg + (1.0 - lev.beta_blend) * (m - d_mn);
            let eps = lev.clamp_eps.min(0.25 * (m - o));
            let want = blend.max(o + eps).min(m - eps);
            let got = threshold_n(m, o, d_no, d_mn, &lev);
            fail!("N blend", got.raw, blend);
            fail!("N", got.value, want);
        }
    }

    for _ in 0..SAMPLES {
        let n = r.random_range(2..=6);
        let corr = random_correlation(&mut r, n);
        let coll: Vec<f64> = (0..n)
            .map(|_| {
                if r.random_bool(0.2) {
                    0.0
                } else {
                    r.random_range(1.0..1000.0)
                }
            })
            .collect();
        let i = r.random_range(0..n);
        let (mut num, mut den) = (0.0, 0.0);
        for z in (0..n).filter(|z| *z != i && coll[*z] > 0.0) {
            num += corr.get(i, z) * coll[z];
            den += coll[z];
        }
        match weighted_correlation(i, &corr, &coll) {
            Ok(got) => fail!("weighted correlation", got, num / den),
            Err(_) if den == 0.0 => {}
            Err(e) => failures.push(format!("weighted correlation: {e}")),
        }

        let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let vols: Vec<f64> = (0..n).map(|_| r.random_range(0.0..0.1)).collect();
        let mut diag = 0.0;
        let mut cross = 0.0;
        let mut scale = 0.0;
        for a in 0..n {
            diag += weights[a].powi(2) * vols[a].powi(2);
            for b in (0..n).filter(|b| *b != a) {
                let term = weights[a] * weights[b] * vols[a] * vols[b] * corr.get(a, b);
                cross += term;
                scale += term.abs();
            }
        }
        let want = diag + cross;
        let got = portfolio_variance(&weights, &vols, &corr).unwrap();
        if (got - want).abs() > FORMULA_TOL * want.abs().max(diag + scale) {
            failures.push(format!("portfolio variance: got {got}, want {want}"));
        }
    }

    for _ in 0..SAMPLES {
        let params = CorrAdjustParams {
            alpha_neg_gain: Gain::Affine {
                g0: r.random_range(0.0..0.1),
                g1: r.random_range(0.0..0.1),
            },
            alpha_pos_gain: Gain::Constant(r.random_range(0.0..0.1)),
            corr_beta: r.random_range(0.1..1.5),
            corr_gamma: r.random_range(0.5..2.0),
            corr_phi: r.random_range(0.5..2.0),
            tan_guard: 0.99,
        };
        let rho: f64 = r.random_range(-1.0..1.0);
        let w = r.random_range(0.0..1.0);
        let alpha = if rho < 0.0 {
            match params.alpha_neg_gain {
                Gain::Affine { g0, g1 } => g0 + g1 * w,
                Gain::Constant(g) => g,
            }
        } else {
            match params.alpha_pos_gain {
                Gain::Affine { g0, g1 } => g0 + g1 * w,
                Gain::Constant(g) => g,
            }
        };
        let limit = 0.99 * std::f64::consts::FRAC_PI_2;
        let arg = (params.corr_beta * rho.signum() * rho.abs().powf(params.corr_gamma))
            .max(-limit)
            .min(limit);
        let t = arg.tan();
        let want = alpha * t.signum() * t.abs().powf(params.corr_phi);
        fail!("delta U", utilization_adjustment(rho, w, &params), want);
    }

    let checks = 8 * SAMPLES + 4 * SAMPLES + 2 * SAMPLES + 4 * SAMPLES + 3 * SAMPLES;
    let detail = if failures.is_empty() {
        format!("{checks}+ randomized evaluations within {FORMULA_TOL:e} relative")
    } else {
        format!("{} mismatches, first: {}", failures.len(), failures[0])
    };
    within_budget(
        verdict(failures.is_empty(), detail),
        started,
        Duration::from_secs(10),
    )
}

// ---------------------------------------------------------------------------
// 2. Balance-sheet residual at constant prices

fn constant_price_scenario(seed: u64, horizon: u64) -> String {
    let mut r = rng(seed ^ 0xA11CE);
    let mut text = format!(
        "name = \"constant-{seed}\"\nseed = {seed}\nhorizon = {horizon}\ntreasury = {:.6}\n",
        r.random_range(0.0..200.0)
    );
    for k in 0..5 {
        let price = r.random_range(0.1..50.0);
        let rate = r.random_range(0.5..1.0);
        let collateral = r.random_range(100.0..2000.0) / price;
        let util = if k == 4 {
            r.random_range(-0.3..0.85)
        } else {
            r.random_range(0.2..0.85)
        };
        let lp = r.random_range(0.5..2.0) * collateral / rate;
        let inventory = lp + util * collateral / rate;
        text += &format!(
            "[[assets]]\nsymbol = \"A{k}\"\ninventory = {inventory}\nlp_inventory = {lp}\n\
             collateral_long = {collateral}\ncoll_rate = {rate}\nprice = {price}\n"
        );
    }
    text += &format!(
        "[policy]\ntarget_refresh_epochs = 20\n\
         [policy.fee]\ntheta_0 = 0.004\ntheta_floor = 0.001\nd_impact = {d}\n\
         [policy.pmo]\nm_threshold = 0.9\nn_wait_epochs = 3\nt0_rounds = 4\nk_scale = 0.02\n\
         [agents.traders]\naccounts = 8\ntrades_per_epoch = {tpe}\np_buy = {pb}\nmean_size = {ms}\nfee_elasticity = {fe}\n\
         [agents.plps]\nflow_scale = 0.005\n\
         [agents.slps]\nreversion = 0.1\nresponse_gain = 1.0\nnoise_scale = 0.02\n\
         [agents.hoarders]\npopulation = 3\nhold_utility = [1.0, 0.95, 0.9]\nsell_utility = 0.9\n\
         [auction]\nenabled = true\ntrigger_epochs = 5\npremium_rate = 0.01\nfill_fraction = 0.25\n",
        d = r.random_range(1.0..8.0),
        tpe = r.random_range(2.0..8.0),
        pb = r.random_range(0.4..0.6),
        ms = r.random_range(5.0..50.0),
        fe = r.random_range(0.0..500.0),
    );
    text
}

fn criterion_residual() -> Verdict {
    use rayon::prelude::*;
    let started = Instant::now();
    let results: Vec<(f64, u64, u64)> = (0..100u64)
        .into_par_iter()
        .map(|k| {
            let ctx = context_from_toml(&constant_price_scenario(5000 + k, 500));
            let run = run_audited(&ctx);
            let worst = run
                .rows
                .iter()
                .map(|row| row.residual.abs())
                .fold(0.0, f64::max);
            (worst, run.summary.aborted_epochs, run.summary.conversions)
        })
        .collect();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let aborted: u64 = results.iter().map(|r| r.1).sum();
    let conversions: u64 = results.iter().map(|r| r.2).sum();
    within_budget(
        verdict(
            worst <= 1e-9 && aborted == 0,
            format!(
                "100 scenarios x 500 epochs, max |residual| {worst:e}, {conversions} conversions, {aborted} aborted epochs"
            ),
        ),
        started,
        Duration::from_secs(60),
    )
}

// ---------------------------------------------------------------------------
// 3. PMO conservation and fairness

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

struct ConversionTrial {
    conversions: u64,
    max_nominal_gap: f64,
    max_lp_gap: f64,
    unfair: u64,
}

fn conversion_trial(seed: u64) -> ConversionTrial {
    let mut r = rng(seed);
    let n = r.random_range(3..=5);
    let mut text = format!(
        "seed = {seed}\nhorizon = 1\n[agents.traders]\naccounts = 0\n[agents.holders]\naccounts = {}\nskew = {}\n",
        r.random_range(5..40),
        r.random_range(0.0..3.0)
    );
    for k in 0..n {
        let price = r.random_range(0.2..20.0);
        let collateral = r.random_range(200.0..2000.0) / price;
        let util = r.random_range(0.3..0.97);
        let lp = r.random_range(100.0..1000.0) / price;
        text += &format!(
            "[[assets]]\nsymbol = \"C{k}\"\ninventory = {}\nlp_inventory = {lp}\ncollateral_long = {collateral}\ncoll_rate = 1.0\nprice = {price}\n",
            lp + util * collateral
        );
    }
    let value: toml::Value = toml::from_str(&text).unwrap();
    let config = resolve(value, &[]).unwrap();
    let mut system = config.initial_state();
    let fee = config.policy.fee;
    let pmo = PmoParams {
        m_threshold: 0.9,
        n_wait_epochs: 2,
        t0_rounds: 3,
        k_scale: r.random_range(0.01..0.1),
        variant: if r.random_bool(0.5) {
            ConversionVariant::Polynomial
        } else {
            ConversionVariant::Logistic
        },
        ..PmoParams::default()
    };
    let thresholds: Vec<f64> = (0..n).map(|_| r.random_range(0.55..0.75)).collect();
    let accounts: Vec<String> = system.ledger.balances.keys().cloned().collect();
    let mut out = ConversionTrial {
        conversions: 0,
        max_nominal_gap: 0.0,
        max_lp_gap: 0.0,
        unfair: 0,
    };
    for epoch in 0..40u64 {
        for _ in 0..r.random_range(0..4) {
            let idx = r.random_range(0..n);
            let side = if r.random_bool(0.5) {
                Side::Buy
            } else {
                Side::Sell
            };
            let account = &accounts[r.random_range(0..accounts.len())];
            apply_trade(
                &mut system,
                idx,
                side,
                r.random_range(1.0..50.0),
                account,
                &fee,
                0.2,
            );
        }
        for i in 0..n {
            let util = lever_utilization(&system.pools[i]);
            let (next, action) = pmo_step(
                util,
                thresholds[i],
                system.pmo_states[i],
                &pmo,
                epoch,
                &system.pools[i],
                system.circulating_supply,
            );
            system.pmo_states[i] = next;
            let (PmoActionKind::Execute, Some(price)) = (action.kind, action.conversion) else {
                continue;
            };
            let asset = system.pools[i].asset.clone();
            let (post, receipt) =
                execute_conversion(&system, &asset, action.fraction, &price).unwrap();
            if receipt.burned_ida > 0.0 {
                out.conversions += 1;
            }
            let issued_nominal = receipt.issued_units * price.quote;
            out.max_nominal_gap = out
                .max_nominal_gap
                .max((receipt.burned_ida - issued_nominal).abs());
            let credited: f64 = post
                .ledger
                .lp_tokens
                .keys()
                .map(|a| post.ledger.lp_claim(a, asset.id) - system.ledger.lp_claim(a, asset.id))
                .sum();
            out.max_lp_gap = out
                .max_lp_gap
                .max((credited * price.quote - receipt.burned_ida).abs());
            let keep = 1.0 - receipt.applied_fraction;
            for (account, before) in &system.ledger.balances {
                let after = post.ledger.balance(account);
                if before.mul_add(keep, -after).abs() > ulp(after) {
                    out.unfair += 1;
                }
            }
            system = post;
        }
    }
    out
}

fn criterion_pmo_conservation() -> Verdict {
    let mut trials = 0;
    let mut conversions = 0;
    let mut gap: f64 = 0.0;
    let mut lp_gap: f64 = 0.0;
    let mut unfair = 0;
    let mut seed = 9000;
    while trials < 50 && seed < 9500 {
        let t = conversion_trial(seed);
        seed += 1;
        if t.conversions == 0 {
            continue;
        }
        trials += 1;
        conversions += t.conversions;
        gap = gap.max(t.max_nominal_gap);
        lp_gap = lp_gap.max(t.max_lp_gap);
        unfair += t.unfair;
    }
    verdict(
        trials == 50 && gap <= 1e-9 && lp_gap <= 1e-9 && unfair == 0,
        format!(
            "{trials} scenarios, {conversions} conversions, max |burned - issued nominal| {gap:e}, \
             max ledger LP gap {lp_gap:e}, {unfair} balances off pro-rata by more than 1 ulp"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Rescind

const RESCIND_TRACE: &str = r#"
name = "rescind"
seed = 4
horizon = 30

[[assets]]
symbol = "X"
inventory = 1000.0
lp_inventory = 500.0
collateral_long = 1000.0
coll_rate = 1.0
price = 1.0

[policy.pmo]
m_threshold = 0.9
n_wait_epochs = 5
t0_rounds = 5
k_scale = 0.05

[agents.traders]
accounts = 0

[agents.holders]
accounts = 1

[[script]]
epoch = 2
pool = "X"
side = "buy"
nominal = 250.0
account = "holder-000"

[[script]]
epoch = 5
pool = "X"
side = "sell"
nominal = 320.0
account = "holder-000"
"#;

fn criterion_rescind() -> Verdict {
    let ctx = context_from_toml(RESCIND_TRACE);
    let run = run_audited(&ctx);
    let m = ctx.config.policy.pmo.m_threshold;
    let n_wait = u64::from(ctx.config.policy.pmo.n_wait_epochs);
    let pmo_events: Vec<(u64, PmoActionKind)> = run
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Pmo { epoch, action, .. } => Some((*epoch, *action)),
            _ => None,
        })
        .collect();
    let announce = pmo_events
        .iter()
        .find(|(_, a)| *a == PmoActionKind::Announce)
        .map(|(e, _)| *e);
    let rescind = pmo_events
        .iter()
        .find(|(_, a)| *a == PmoActionKind::Rescind)
        .map(|(e, _)| *e);
    let (Some(a), Some(r)) = (announce, rescind) else {
        return verdict(
            false,
            format!("expected announce then rescind, got {pmo_events:?}"),
        );
    };
    let ra = &run.rows[a as usize].pools[0];
    let rr = &run.rows[r as usize].pools[0];
    let entered = ra.util >= ra.n_threshold && ra.util < m;
    let left = rr.util < rr.n_threshold;
    let in_time = r > a && r - a < n_wait;
    let conversions = run
        .events
        .iter()
        .filter(|e| matches!(e, Event::Conversion { .. }))
        .count();
    let lp_claims = run.final_state.ledger.total_lp(0);
    let ok = entered
        && left
        && in_time
        && conversions == 0
        && run.summary.converted_fraction == 0.0
        && lp_claims == 0.0;
    verdict(
        ok,
        format!(
            "announce at {a} (U {:.4} in [N {:.4}, M {m})), rescind at {r} (U {:.4} < N {:.4}), \
             {conversions} conversions, converted supply {}, LP claims {lp_claims}",
            ra.util, ra.n_threshold, rr.util, rr.n_threshold, run.summary.converted_fraction
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Expected shortfall

fn brute_force_es(losses: &[f64], alpha: f64) -> f64 {
    let mut v = losses.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (((1.0 - alpha) * v.len() as f64).ceil() as usize).max(1);
    let mut sum = 0.0;
    for x in v.iter().rev().take(k) {
        sum += x;
    }
    sum / k as f64
}

fn criterion_es() -> Verdict {
    let started = Instant::now();
    let mut r = rng(555);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=10_000);
        let alpha = r.random_range(0.5..0.999);
        let losses: Vec<f64> = (0..n)
            .map(|_| {
                if r.random_bool(0.1) {
                    r.random_range(-5i32..5) as f64
                } else {
                    r.random_range(-100.0..100.0)
                }
            })
            .collect();
        if expected_shortfall(&losses, alpha).unwrap().es != brute_force_es(&losses, alpha) {
            mismatches += 1;
        }
    }

    let (sigma, drift, horizon, alpha) = (0.05, 0.001, 10u32, 0.95);
    let model = ReturnModel::new(
        vec![AssetDynamics {
            drift,
            volatility: sigma,
            ..Default::default()
        }],
        None,
    )
    .unwrap();
    let scenarios = simulate_returns(&model, 100_000, horizon, 77);
    let mc = expected_shortfall(&scenarios.losses(&[1.0]), alpha)
        .unwrap()
        .es;
    // Loss 1 − e^X with X ~ N(mu, s²).
    let h = f64::from(horizon);
    let mu = h * (drift - 0.5 * sigma * sigma);
    let s = sigma * h.sqrt();
    let std = Normal::new(0.0, 1.0).unwrap();
    let z = std.inverse_cdf(1.0 - alpha);
    let closed = 1.0 - (mu + 0.5 * s * s).exp() * std.cdf(z - s) / (1.0 - alpha);
    let rel = (mc - closed).abs() / closed;
    within_budget(
        verdict(
            mismatches == 0 && rel < 0.05,
            format!(
                "{mismatches}/1000 historical mismatches; Monte Carlo ES {mc:.6} vs closed form {closed:.6} ({:.2}% off)",
                rel * 100.0
            ),
        ),
        started,
        Duration::from_secs(120),
    )
}

// ---------------------------------------------------------------------------
// 6. Optimizer

/// Orders candidates the way the optimizer promises to: feasible first,
/// then higher objective among feasible plans, then lower ES, then the
/// lexicographically smallest grid position.
fn better(a: &PlanEvaluation, b: &PlanEvaluation) -> bool {
    if a.feasible != b.feasible {
        return a.feasible;
    }
    if a.feasible && a.objective != b.objective {
        return a.objective > b.objective;
    }
    if a.es.es != b.es.es {
        return a.es.es < b.es.es;
    }
    a.indices < b.indices
}

fn optimizer_instance(seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    let mut text = "seed = 1\nhorizon = 1\n".to_string();
    let mut dynamics = Vec::new();
    for k in 0..2 {
        let price = r.random_range(0.5..5.0);
        let collateral = r.random_range(200.0..2000.0);
        let util = r.random_range(0.3..0.8);
        let lp = r.random_range(100.0..1000.0);
        text += &format!(
            "[[assets]]\nsymbol = \"O{k}\"\ninventory = {}\nlp_inventory = {lp}\ncollateral_long = {collateral}\ncoll_rate = 1.0\nprice = {price}\n",
            lp + util * collateral
        );
        dynamics.push(AssetDynamics {
            volatility: r.random_range(0.005..0.05),
            ..Default::default()
        });
    }
    let rho = r.random_range(-0.8..0.8);
    let model = ReturnModel::new(dynamics, Some(&[vec![1.0, rho], vec![rho, 1.0]])).unwrap();
    let config = resolve(toml::from_str(&text).unwrap(), &[]).unwrap();
    let system = config.initial_state();
    let scenarios = simulate_returns(&model, 1000, 5, seed);
    let pmo = PmoParams {
        m_threshold: 0.9,
        k_scale: r.random_range(0.005..0.05),
        ..PmoParams::default()
    };
    let lever = LeverParams::default();
    let grid = OptimizerConfig {
        collateral_factors: (0..10).map(|k| 0.5 + 0.1 * k as f64).collect(),
        du_grid: vec![-0.2, -0.1, 0.0, 0.1, 0.2],
        assumed_rounds: r.random_range(1..4),
        strategy: SearchStrategy::Auto,
        ..OptimizerConfig::default()
    };
    let base_target = r.random_range(0.3..0.6);
    let mut es = EsParams {
        alpha_conf: 0.95,
        ..EsParams::default()
    };
    let (delta_no, delta_mn) = (r.random_range(0.05..0.2), r.random_range(0.05..0.2));
    let inputs_with = |es: &EsParams| -> PlanEvaluation {
        let inputs = OptimizerInputs {
            system: &system,
            base_target,
            scenarios: &scenarios,
            es,
            pmo: &pmo,
            lever: &lever,
            delta_no,
            delta_mn,
        };
        evaluate_plan(&inputs, &grid, &[(5, 2), (5, 2)]).expect("reference plan")
    };
    let reference = inputs_with(&es);
    es.es_cap = reference.es.es * r.random_range(0.9..1.1);
    let inputs = OptimizerInputs {
        system: &system,
        base_target,
        scenarios: &scenarios,
        es: &es,
        pmo: &pmo,
        lever: &lever,
        delta_no,
        delta_mn,
    };

    let mut oracle: Option<PlanEvaluation> = None;
    let mut admissible = 0;
    for c0 in 0..10 {
        for u0 in 0..5 {
            for c1 in 0..10 {
                for u1 in 0..5 {
                    let Some(e) = evaluate_plan(&inputs, &grid, &[(c0, u0), (c1, u1)]) else {
                        continue;
                    };
                    admissible += 1;
                    if oracle.as_ref().is_none_or(|b| better(&e, b)) {
                        oracle = Some(e);
                    }
                }
            }
        }
    }
    let oracle = oracle.ok_or("no admissible plan")?;
    let got = optimize_targets(&inputs, &grid).ok_or("optimizer returned nothing")?;
    if got.indices != oracle.indices
        || got.objective != oracle.objective
        || got.es.es != oracle.es.es
    {
        return Err(format!(
            "seed {seed}: optimizer {:?} obj {} es {} vs oracle {:?} obj {} es {}",
            got.indices, got.objective, got.es.es, oracle.indices, oracle.objective, oracle.es.es
        ));
    }
    let independent = 1.0 - oracle.conversion_fractions.iter().sum::<f64>();
    if !rel_close(independent, got.objective, 1e-12) {
        return Err(format!(
            "seed {seed}: objective {} != 1 - sum H",
            got.objective
        ));
    }
    Ok(format!(
        "{admissible} admissible, feasible={}",
        oracle.feasible
    ))
}

fn criterion_optimizer() -> Verdict {
    let started = Instant::now();
    let mut errors = Vec::new();
    let mut feasible = 0;
    for seed in 0..20u64 {
        match optimizer_instance(700 + seed) {
            Ok(d) => feasible += usize::from(d.ends_with("true")),
            Err(e) => errors.push(e),
        }
    }
    within_budget(
        verdict(
            errors.is_empty(),
            if errors.is_empty() {
                format!("20/20 instances match exhaustive enumeration ({feasible} with a feasible optimum)")
            } else {
                format!("{} mismatches, first: {}", errors.len(), errors[0])
            },
        ),
        started,
        Duration::from_secs(120),
    )
}

// ---------------------------------------------------------------------------
// 7. Fee steering

fn fee_steering_scenario(seed: u64) -> String {
    format!(
        r#"
name = "fee-steering"
seed = {seed}
horizon = 2000

[[assets]]
symbol = "OVER"
inventory = 24000.0
lp_inventory = 10000.0
collateral_long = 20000.0
coll_rate = 1.0
price = 1.0

[[assets]]
symbol = "UNDER"
inventory = 16000.0
lp_inventory = 10000.0
collateral_long = 20000.0
coll_rate = 1.0
price = 1.0

[policy]
base_target = 0.5

[policy.fee]
theta_0 = 0.004
theta_floor = 0.001
d_impact = 20.0

[policy.pmo]
m_threshold = 0.95
n_wait_epochs = 100000

[agents.traders]
accounts = 20
trades_per_epoch = 2.0
p_buy = 0.5
mean_size = 5.0
size_sigma = 0.5
fee_elasticity = 500.0
initial_share = 0.5
"#
    )
}

fn criterion_fee_steering() -> Verdict {
    let mut passed = 0;
    let mut worst = (f64::NEG_INFINITY, f64::INFINITY);
    for seed in 1..=10u64 {
        let ctx = context_from_toml(&fee_steering_scenario(seed));
        let run = run_audited(&ctx);
        let over = run.symbols.iter().position(|s| s == "OVER").unwrap();
        let under = run.symbols.iter().position(|s| s == "UNDER").unwrap();
        let (fo, fu) = (run.summary.pool_flow[over], run.summary.pool_flow[under]);
        worst = (worst.0.max(fo), worst.1.min(fu));
        if fo < 0.0 && fu > 0.0 {
            passed += 1;
        }
    }
    verdict(
        passed == 10,
        format!(
            "{passed}/10 seeds; largest flow into over-utilized pool {:.1}, smallest into under-utilized pool {:.1}",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Determinism

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut files = 0;
    let mut entries: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for path in entries {
        let other = b.join(path.file_name().unwrap());
        if path.is_dir() {
            files += same_tree(&path, &other)?;
        } else {
            let x = std::fs::read(&path).map_err(|e| e.to_string())?;
            let y = std::fs::read(&other).map_err(|e| format!("{}: {e}", other.display()))?;
            if x != y {
                return Err(format!("{} differs", path.display()));
            }
            files += 1;
        }
    }
    Ok(files)
}

fn criterion_determinism() -> Verdict {
    let golden = scenario_dir().join("golden.toml");
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for k in 0..2 {
        let config = resolve(read_config_value(&golden).unwrap(), &[]).unwrap();
        let ctx = SimContext::new(config, &scenario_dir()).unwrap();
        let run = run_audited(&ctx);
        let dir = tmp.path().join(format!("golden-{k}"));
        run.write(&dir, &ctx.config).unwrap();
        dirs.push(dir);
    }
    let runs = same_tree(&dirs[0], &dirs[1]);

    let raw = read_config_value(&golden).unwrap();
    let overrides = vec![("horizon".to_string(), toml::Value::Integer(150))];
    let axes = vec![
        GridAxis::parse("policy.fee.d_impact=2.0,6.0").unwrap(),
        GridAxis::parse("seed=1,2,3").unwrap(),
    ];
    let one = tmp.path().join("jobs-1");
    let eight = tmp.path().join("jobs-8");
    run_sweep(&raw, &overrides, &axes, &scenario_dir(), &one, 1).unwrap();
    run_sweep(&raw, &overrides, &axes, &scenario_dir(), &eight, 8).unwrap();
    let sweeps = same_tree(&one, &eight);
    match (runs, sweeps) {
        (Ok(a), Ok(b)) => verdict(
            true,
            format!("golden runs identical ({a} files); sweeps with 1 and 8 workers identical ({b} files)"),
        ),
        (Err(e), _) | (_, Err(e)) => verdict(false, e),
    }
}

// ---------------------------------------------------------------------------
// 9. Threshold ordering

fn criterion_ordering() -> Verdict {
    // A volatile scenario with the optimizer and correlation refresh on,
    // so targets move away from the base.
    let mut text = constant_price_scenario(31337, 300);
    text = text.replace("target_refresh_epochs = 20", "target_refresh_epochs = 10\noptimizer_enabled = true\n[policy.optimizer]\ncollateral_factors = [0.75, 1.0, 1.25]\ndu_grid = [-0.1, 0.0, 0.1]\n[policy.es]\nsample_count = 200\nhorizon = 5");
    let mut value: toml::Value = toml::from_str(&text).unwrap();
    for asset in value["assets"].as_array_mut().unwrap() {
        asset.as_table_mut().unwrap().insert(
            "dynamics".into(),
            toml::Value::try_from(AssetDynamics {
                volatility: 0.02,
                ..Default::default()
            })
            .unwrap(),
        );
    }
    let config = resolve(value, &[]).unwrap();
    let ctx = SimContext::new(config, &scenario_dir()).unwrap();
    let run = run_audited(&ctx);
    let refreshes = run
        .events
        .iter()
        .filter(|e| {
            matches!(
                e,
                Event::TargetRefresh {
                    optimizer_objective: Some(_),
                    ..
                }
            )
        })
        .count();

    let a = AUDIT.lock().unwrap();
    verdict(
        a.ordering == 0 && a.deltas == 0 && a.runs > 0 && refreshes > 0,
        format!(
            "{} runs, {} epochs audited, {} ordering violations, {} delta violations",
            a.runs, a.rows, a.ordering, a.deltas
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("formula fidelity", criterion_formulas),
        ("balance-sheet residual", criterion_residual),
        ("PMO conservation and fairness", criterion_pmo_conservation),
        ("rescind", criterion_rescind),
        ("expected shortfall oracles", criterion_es),
        ("optimizer oracle", criterion_optimizer),
        ("fee steering", criterion_fee_steering),
        ("determinism", criterion_determinism),
        ("threshold ordering", criterion_ordering),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let v = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {} [{}] {name}: {} ({:.2}s)",
            k + 1,
            if v.ok { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.ok);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
