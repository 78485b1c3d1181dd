use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::risk::{expected_shortfall, EsEstimate, EsParams, ReturnScenarios};
use super::AssetError;
use crate::policy::lever::{threshold_n, LeverParams};
use crate::policy::pmo::{conversion_fraction, PmoParams};
use crate::state::SystemState;

/// Collateral sizes and target adjustments per pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPlan {
    pub collateral_targets: Vec<f64>,
    pub du_adjustments: Vec<f64>,
    pub per_pool_targets: Vec<f64>,
}

impl TargetPlan {
    pub fn new(base_target: f64, collateral_targets: Vec<f64>, du_adjustments: Vec<f64>) -> Self {
        let per_pool_targets = du_adjustments.iter().map(|du| base_target - du).collect();
        Self {
            collateral_targets,
            du_adjustments,
            per_pool_targets,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    /// Exhaustive when the grid has at most `exhaustive_limit` points,
    /// coordinate descent otherwise.
    #[default]
    Auto,
    Exhaustive,
    CoordinateDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Candidate collateral sizes as multiples of each pool's current long
    /// collateral.
    pub collateral_factors: Vec<f64>,
    /// Candidate ΔU values, shared by all pools.
    pub du_grid: Vec<f64>,
    /// PMO round count at which first-interval conversion is priced.
    pub assumed_rounds: u32,
    #[serde(default)]
    pub strategy: SearchStrategy,
    #[serde(default = "default_exhaustive_limit")]
    pub exhaustive_limit: u64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: u32,
}

fn default_exhaustive_limit() -> u64 {
    100_000
}

fn default_max_sweeps() -> u32 {
    50
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            collateral_factors: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            du_grid: vec![-0.1, -0.05, 0.0, 0.05, 0.1],
            assumed_rounds: 1,
            strategy: SearchStrategy::Auto,
            exhaustive_limit: default_exhaustive_limit(),
            max_sweeps: default_max_sweeps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), AssetError> {
        if self.collateral_factors.is_empty() || self.du_grid.is_empty() {
            return Err(AssetError::Params(
                "optimizer grids must be nonempty".into(),
            ));
        }
        if self
            .collateral_factors
            .iter()
            .any(|f| !(f.is_finite() && *f >= 0.0))
        {
            return Err(AssetError::Params(
                "collateral factors must be finite and non-negative".into(),
            ));
        }
        if self.du_grid.iter().any(|d| !d.is_finite()) {
            return Err(AssetError::Params("du grid must be finite".into()));
        }
        Ok(())
    }

    /// Number of grid points for `pools` pools, saturating.
    pub fn grid_size(&self, pools: usize) -> u64 {
        let per_pool = (self.collateral_factors.len() * self.du_grid.len()) as u64;
        (0..pools).fold(1u64, |acc, _| acc.saturating_mul(per_pool))
    }
}

/// Everything a plan is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerInputs<'a> {
    pub system: &'a SystemState,
    pub base_target: f64,
    pub scenarios: &'a ReturnScenarios,
    pub es: &'a EsParams,
    pub pmo: &'a PmoParams,
    pub lever: &'a LeverParams,
    pub delta_no: f64,
    pub delta_mn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEvaluation {
    pub plan: TargetPlan,
    /// Grid position per pool as (collateral index, ΔU index).
    pub indices: Vec<(usize, usize)>,
    /// Fraction of supply left unconverted, `1 − Σ H^i`.
    pub objective: f64,
    pub es: EsEstimate,
    pub feasible: bool,
    pub utilizations: Vec<f64>,
    pub conversion_fractions: Vec<f64>,
}

struct Implied {
    utilizations: Vec<f64>,
    shares: Vec<f64>,
    exposures: Vec<f64>,
}

/// Steady-state allocation implied by a plan: the circulating supply is
/// backed by open inventory spread over pools in proportion to their
/// capacity at target, `P·U*^i·C^i/ϱ^i`.
fn implied(system: &SystemState, plan: &TargetPlan) -> Option<Implied> {
    let caps: Vec<f64> = system
        .pools
        .iter()
        .zip(plan.per_pool_targets.iter().zip(&plan.collateral_targets))
        .map(|(p, (u, c))| p.density.price * u * c / p.coll_rate)
        .collect();
    let total: f64 = caps.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let cs = system.circulating_supply;
    let shares: Vec<f64> = caps.iter().map(|c| c / total).collect();
    let utilizations = plan
        .per_pool_targets
        .iter()
        .map(|u| u * cs / total)
        .collect();
    let exposures = system
        .pools
        .iter()
        .zip(shares.iter().zip(&plan.collateral_targets))
        .map(|(p, (s, c))| cs * s + p.density.nominal(*c))
        .collect();
    Some(Implied {
        utilizations,
        shares,
        exposures,
    })
}

/// Nominal asset base per pool under a plan, or `None` when the plan gives
/// no capacity at all.
pub fn plan_exposures(system: &SystemState, plan: &TargetPlan) -> Option<Vec<f64>> {
    implied(system, plan).map(|i| i.exposures)
}

/// Scores one grid point. Returns `None` when a per-pool target falls
/// outside `(0, M)` or the plan has no capacity.
pub fn evaluate_plan(
    inputs: &OptimizerInputs<'_>,
    config: &OptimizerConfig,
    indices: &[(usize, usize)],
) -> Option<PlanEvaluation> {
    let system = inputs.system;
    let m = inputs.pmo.m_threshold;
    let collateral: Vec<f64> = system
        .pools
        .iter()
        .zip(indices)
        .map(|(p, (ci, _))| p.collateral_long * config.collateral_factors[*ci])
        .collect();
    let du: Vec<f64> = indices.iter().map(|(_, ui)| config.du_grid[*ui]).collect();
    let plan = TargetPlan::new(inputs.base_target, collateral, du);
    if plan.per_pool_targets.iter().any(|u| !(*u > 0.0 && *u < m)) {
        return None;
    }
    let imp = implied(system, &plan)?;

    let mut fractions = Vec::with_capacity(indices.len());
    for k in 0..indices.len() {
        let u = imp.utilizations[k];
        let n = threshold_n(
            m,
            plan.per_pool_targets[k],
            inputs.delta_no,
            inputs.delta_mn,
            inputs.lever,
        )
        .value;
        let h = if u >= m {
            imp.shares[k].min(1.0)
        } else if u >= n {
            conversion_fraction(u, config.assumed_rounds, inputs.pmo)
        } else {
            0.0
        };
        fractions.push(h);
    }
    let objective = 1.0 - fractions.iter().sum::<f64>();
    let losses = inputs.scenarios.losses(&imp.exposures);
    let es = expected_shortfall(&losses, inputs.es.alpha_conf).ok()?;
    Some(PlanEvaluation {
        plan,
        indices: indices.to_vec(),
        objective,
        feasible: es.es < inputs.es.es_cap,
        es,
        utilizations: imp.utilizations,
        conversion_fractions: fractions,
    })
}

/// Total order used by every search: feasible before infeasible, then
/// higher objective (feasible only), lower ES, lexicographically smaller
/// grid position. `Less` means `a` is preferred.
pub fn compare_plans(a: &PlanEvaluation, b: &PlanEvaluation) -> Ordering {
    b.feasible
        .cmp(&a.feasible)
        .then_with(|| {
            if a.feasible {
                b.objective.total_cmp(&a.objective)
            } else {
                Ordering::Equal
            }
        })
        .then_with(|| a.es.es.total_cmp(&b.es.es))
        .then_with(|| a.indices.cmp(&b.indices))
}

fn keep_better(best: &mut Option<PlanEvaluation>, candidate: Option<PlanEvaluation>) -> bool {
    match (best.as_ref(), candidate) {
        (_, None) => false,
        (None, Some(c)) => {
            *best = Some(c);
            true
        }
        (Some(b), Some(c)) => {
            if compare_plans(&c, b) == Ordering::Less {
                *best = Some(c);
                true
            } else {
                false
            }
        }
    }
}

fn exhaustive(inputs: &OptimizerInputs<'_>, config: &OptimizerConfig) -> Option<PlanEvaluation> {
    let n = inputs.system.pools.len();
    let (nc, nu) = (config.collateral_factors.len(), config.du_grid.len());
    let mut idx = vec![(0usize, 0usize); n];
    let mut best = None;
    loop {
        keep_better(&mut best, evaluate_plan(inputs, config, &idx));
        let mut k = n;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if idx[k].1 + 1 < nu {
                idx[k].1 += 1;
                break;
            }
            idx[k].1 = 0;
            if idx[k].0 + 1 < nc {
                idx[k].0 += 1;
                break;
            }
            idx[k].0 = 0;
        }
    }
}

fn nearest(grid: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (k, g) in grid.iter().enumerate() {
        if (g - x).abs() < (grid[best] - x).abs() {
            best = k;
        }
    }
    best
}

fn coordinate_descent(
    inputs: &OptimizerInputs<'_>,
    config: &OptimizerConfig,
) -> Option<PlanEvaluation> {
    let n = inputs.system.pools.len();
    let start = (
        nearest(&config.collateral_factors, 1.0),
        nearest(&config.du_grid, 0.0),
    );
    let mut idx = vec![start; n];
    let mut best = evaluate_plan(inputs, config, &idx);
    for _ in 0..config.max_sweeps.max(1) {
        let mut improved = false;
        for k in 0..n {
            for axis in 0..2 {
                let len = if axis == 0 {
                    config.collateral_factors.len()
                } else {
                    config.du_grid.len()
                };
                for v in 0..len {
                    let mut trial = best
                        .as_ref()
                        .map_or_else(|| idx.clone(), |b| b.indices.clone());
                    if axis == 0 {
                        trial[k].0 = v;
                    } else {
                        trial[k].1 = v;
                    }
                    improved |= keep_better(&mut best, evaluate_plan(inputs, config, &trial));
                }
            }
        }
        if let Some(b) = &best {
            idx = b.indices.clone();
        }
        if !improved {
            break;
        }
    }
    best
}

/// Searches the (C, ΔU) grid for the plan that leaves the most supply
/// unconverted with portfolio ES strictly below the cap. When no grid point
/// is feasible the lowest-ES point is returned with `feasible = false`;
/// `None` means no grid point was admissible at all.
pub fn optimize_targets(
    inputs: &OptimizerInputs<'_>,
    config: &OptimizerConfig,
) -> Option<PlanEvaluation> {
    let use_exhaustive = match config.strategy {
        SearchStrategy::Exhaustive => true,
        SearchStrategy::CoordinateDescent => false,
        SearchStrategy::Auto => {
            config.grid_size(inputs.system.pools.len()) <= config.exhaustive_limit
        }
    };
    if use_exhaustive {
        exhaustive(inputs, config)
    } else {
        coordinate_descent(inputs, config)
    }
}
