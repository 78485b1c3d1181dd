//! Invariant suite run over a finished simulation.

use std::fmt;

use crate::assets::tail_count;

use super::run::RunOutput;
use super::step::SimContext;

/// Plain sort-and-average ES used to cross-check the production estimator.
pub fn brute_force_es(losses: &[f64], alpha_conf: f64) -> f64 {
    let mut v = losses.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let k = tail_count(v.len(), alpha_conf);
    let mut sum = 0.0;
    for x in v.iter().rev().take(k) {
        sum += x;
    }
    sum / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIP",
        };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, ok: bool, detail: String) -> CheckResult {
    let status = if ok {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    CheckResult {
        name,
        status,
        detail,
    }
}

/// Evaluates the invariant checks recorded during `run`.
pub fn validate_run(ctx: &SimContext, run: &RunOutput) -> Vec<CheckResult> {
    let tol = ctx.config.tolerance;
    let c = &run.checks;
    let nonlinear = ctx.config.assets.iter().any(|a| a.depth_slope > 0.0);
    let residual = if nonlinear {
        CheckResult {
            name: "balance_sheet_residual",
            status: CheckStatus::Skipped,
            detail: "revaluation term is only tracked exactly for linear liquidity density".into(),
        }
    } else {
        check(
            "balance_sheet_residual",
            c.max_adjusted_residual <= tol,
            format!(
                "max |residual - explained| = {:e} (raw {:e})",
                c.max_adjusted_residual, c.max_raw_residual
            ),
        )
    };
    vec![
        check(
            "epochs_completed",
            run.summary.aborted_epochs == 0,
            format!(
                "{} aborted of {}",
                run.summary.aborted_epochs, run.summary.epochs
            ),
        ),
        residual,
        check(
            "fee_bounds",
            c.fees_out_of_bounds == 0,
            format!(
                "{} of {} trades outside [floor, cap]",
                c.fees_out_of_bounds, c.trades
            ),
        ),
        check(
            "conversion_conservation",
            c.max_conversion_gap <= tol,
            format!("max relative gap {:e}", c.max_conversion_gap),
        ),
        check(
            "threshold_ordering",
            c.ordering_violations == 0,
            format!("{} epochs with O > N or N > M", c.ordering_violations),
        ),
        check(
            "delta_bounds",
            c.delta_violations == 0,
            format!(
                "{} epochs with a delta outside its range",
                c.delta_violations
            ),
        ),
        check(
            "es_oracle",
            c.es_oracle_mismatches == 0,
            format!(
                "{} mismatches against sort-and-average",
                c.es_oracle_mismatches
            ),
        ),
    ]
}
