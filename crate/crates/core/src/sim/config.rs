//! Scenario configuration: schema, defaults, validation and dotted-key
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{CorrAdjustParams, CorrelationMatrix, EsParams, OptimizerConfig, RegimeParams};
use crate::market::{AssetDynamics, ReturnModel};
use crate::policy::fee::{FeeParams, Side};
use crate::policy::lever::LeverParams;
use crate::policy::pmo::PmoParams;
use crate::state::{
    open_inventory, AssetId, CollateralMode, HoldersLedger, LiquidityDensity, PoolState,
    SystemState,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("malformed override '{0}' (expected key=value)")]
    MalformedOverride(String),
}

fn invalid(field: &str, message: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetConfig {
    pub symbol: String,
    /// Defaults to the asset's position in the list.
    #[serde(default)]
    pub id: Option<u32>,
    pub inventory: f64,
    pub lp_inventory: f64,
    pub collateral_long: f64,
    #[serde(default)]
    pub collateral_short: f64,
    pub coll_rate: f64,
    pub price: f64,
    #[serde(default)]
    pub depth_slope: f64,
    #[serde(default)]
    pub dynamics: AssetDynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    #[serde(default = "defaults::base_target")]
    pub base_target: f64,
    #[serde(default)]
    pub collateral_mode: CollateralMode,
    #[serde(default)]
    pub fee: FeeParams,
    #[serde(default)]
    pub pmo: PmoParams,
    #[serde(default)]
    pub lever: LeverParams,
    #[serde(default)]
    pub correlation: CorrAdjustParams,
    #[serde(default)]
    pub es: EsParams,
    #[serde(default)]
    pub regime: RegimeParams,
    /// Share of every collected fee paid to the treasury.
    #[serde(default = "defaults::treasury_fee_share")]
    pub treasury_fee_share: f64,
    /// Epochs between target refreshes; 0 keeps the initial targets.
    #[serde(default)]
    pub target_refresh_epochs: u64,
    /// Realized-return window used for correlation, volatility and ES.
    #[serde(default = "defaults::return_window")]
    pub return_window: usize,
    /// Injected correlation matrix; realized correlations are used otherwise.
    #[serde(default)]
    pub correlation_file: Option<PathBuf>,
    #[serde(default)]
    pub optimizer_enabled: bool,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            base_target: defaults::base_target(),
            collateral_mode: CollateralMode::default(),
            fee: FeeParams::default(),
            pmo: PmoParams::default(),
            lever: LeverParams::default(),
            correlation: CorrAdjustParams::default(),
            es: EsParams::default(),
            regime: RegimeParams::default(),
            treasury_fee_share: defaults::treasury_fee_share(),
            target_refresh_epochs: 0,
            return_window: defaults::return_window(),
            correlation_file: None,
            optimizer_enabled: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceModelConfig {
    /// Row-major correlation of diffusion shocks, in asset order.
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldersConfig {
    /// Passive accounts holding whatever supply agents do not.
    #[serde(default = "defaults::holder_accounts")]
    pub accounts: usize,
    /// Account `k` receives a share proportional to `(k + 1)^skew`.
    #[serde(default = "defaults::one")]
    pub skew: f64,
}

impl Default for HoldersConfig {
    fn default() -> Self {
        Self {
            accounts: defaults::holder_accounts(),
            skew: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraderModel {
    #[serde(default = "defaults::trader_accounts")]
    pub accounts: usize,
    /// Poisson mean of trades per epoch.
    #[serde(default)]
    pub trades_per_epoch: f64,
    #[serde(default = "defaults::half")]
    pub p_buy: f64,
    /// Median trade size in peg-units.
    #[serde(default = "defaults::trade_size")]
    pub mean_size: f64,
    /// Log-scale dispersion of trade sizes.
    #[serde(default = "defaults::half")]
    pub size_sigma: f64,
    /// Logit sensitivity of pool choice to the quoted fee (per unit fee).
    #[serde(default)]
    pub fee_elasticity: f64,
    /// Fraction of the initial supply held by traders.
    #[serde(default = "defaults::trader_share")]
    pub initial_share: f64,
}

impl Default for TraderModel {
    fn default() -> Self {
        Self {
            accounts: defaults::trader_accounts(),
            trades_per_epoch: 0.0,
            p_buy: 0.5,
            mean_size: defaults::trade_size(),
            size_sigma: 0.5,
            fee_elasticity: 0.0,
            initial_share: defaults::trader_share(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlpModel {
    /// Std of per-epoch LP deposits as a fraction of LP inventory.
    #[serde(default)]
    pub flow_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlpModel {
    /// Per-epoch pull of collateral toward its target.
    #[serde(default)]
    pub reversion: f64,
    /// Target shrinks as `1 / (1 + response_gain·σ)` with realized volatility σ.
    #[serde(default)]
    pub response_gain: f64,
    #[serde(default = "defaults::vol_window")]
    pub vol_window: usize,
    /// Std of multiplicative collateral noise per epoch.
    #[serde(default)]
    pub noise_scale: f64,
    /// Collateral never falls below this fraction of its base level.
    #[serde(default = "defaults::floor_fraction")]
    pub floor_fraction: f64,
}

impl Default for SlpModel {
    fn default() -> Self {
        Self {
            reversion: 0.0,
            response_gain: 0.0,
            vol_window: defaults::vol_window(),
            noise_scale: 0.0,
            floor_fraction: defaults::floor_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoarderModel {
    #[serde(default)]
    pub population: usize,
    /// One value for everyone, or one per hoarder.
    #[serde(default = "defaults::hold_utility")]
    pub hold_utility: Vec<f64>,
    #[serde(default = "defaults::sell_utility")]
    pub sell_utility: f64,
    /// Maps an announced conversion fraction to expected hoarding cost.
    #[serde(default = "defaults::cost_gain")]
    pub cost_expectation_gain: f64,
    /// Fraction of the initial supply held by hoarders.
    #[serde(default = "defaults::hoarder_share")]
    pub initial_share: f64,
}

impl Default for HoarderModel {
    fn default() -> Self {
        Self {
            population: 0,
            hold_utility: defaults::hold_utility(),
            sell_utility: defaults::sell_utility(),
            cost_expectation_gain: defaults::cost_gain(),
            initial_share: defaults::hoarder_share(),
        }
    }
}

impl HoarderModel {
    pub fn hold_utility_of(&self, k: usize) -> f64 {
        if self.hold_utility.len() == 1 {
            self.hold_utility[0]
        } else {
            self.hold_utility[k]
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsConfig {
    #[serde(default)]
    pub holders: HoldersConfig,
    #[serde(default)]
    pub traders: TraderModel,
    #[serde(default)]
    pub plps: PlpModel,
    #[serde(default)]
    pub slps: SlpModel,
    #[serde(default)]
    pub hoarders: HoarderModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuctionParams {
    #[serde(default)]
    pub enabled: bool,
    /// Consecutive epochs above target before the auction fires.
    #[serde(default = "defaults::trigger_epochs")]
    pub trigger_epochs: u32,
    /// Premium paid per peg-unit of inventory moved.
    #[serde(default = "defaults::premium_rate")]
    pub premium_rate: f64,
    #[serde(default = "defaults::half")]
    pub fill_fraction: f64,
    /// Block trader flow into a pool while its auction is active.
    #[serde(default)]
    pub gate_ida_trades: bool,
}

impl Default for AuctionParams {
    fn default() -> Self {
        Self {
            enabled: false,
            trigger_epochs: defaults::trigger_epochs(),
            premium_rate: defaults::premium_rate(),
            fill_fraction: 0.5,
            gate_ida_trades: false,
        }
    }
}

/// A trade injected at a fixed epoch, applied before random trader flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedTrade {
    pub epoch: u64,
    pub pool: String,
    pub side: Side,
    /// Gross peg-units: value deposited for a buy, IDA sold for a sell.
    pub nominal: f64,
    #[serde(default = "defaults::script_account")]
    pub account: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "defaults::metrics_file")]
    pub metrics: String,
    #[serde(default = "defaults::events_file")]
    pub events: String,
    #[serde(default = "defaults::final_state_file")]
    pub final_state: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            metrics: defaults::metrics_file(),
            events: defaults::events_file(),
            final_state: defaults::final_state_file(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "defaults::name")]
    pub name: String,
    pub seed: u64,
    pub horizon: u64,
    #[serde(default)]
    pub treasury: f64,
    pub assets: Vec<AssetConfig>,
    #[serde(default)]
    pub policy: PolicyParams,
    #[serde(default)]
    pub price_model: PriceModelConfig,
    #[serde(default)]
    pub agents: AgentsConfig,
    #[serde(default)]
    pub auction: AuctionParams,
    #[serde(default)]
    pub script: Vec<ScriptedTrade>,
    #[serde(default)]
    pub outputs: OutputConfig,
    /// Absolute tolerance of the per-epoch state invariants.
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
}

mod defaults {
    pub fn base_target() -> f64 {
        0.5
    }
    pub fn treasury_fee_share() -> f64 {
        0.2
    }
    pub fn return_window() -> usize {
        50
    }
    pub fn holder_accounts() -> usize {
        5
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn half() -> f64 {
        0.5
    }
    pub fn trader_accounts() -> usize {
        10
    }
    pub fn trade_size() -> f64 {
        10.0
    }
    pub fn trader_share() -> f64 {
        0.2
    }
    pub fn vol_window() -> usize {
        20
    }
    pub fn floor_fraction() -> f64 {
        0.1
    }
    pub fn hold_utility() -> Vec<f64> {
        vec![1.0]
    }
    pub fn sell_utility() -> f64 {
        0.9
    }
    pub fn cost_gain() -> f64 {
        10.0
    }
    pub fn hoarder_share() -> f64 {
        0.1
    }
    pub fn trigger_epochs() -> u32 {
        5
    }
    pub fn premium_rate() -> f64 {
        0.01
    }
    pub fn script_account() -> String {
        "script".into()
    }
    pub fn metrics_file() -> String {
        "metrics.csv".into()
    }
    pub fn events_file() -> String {
        "events.jsonl".into()
    }
    pub fn final_state_file() -> String {
        "final_state.json".into()
    }
    pub fn name() -> String {
        "scenario".into()
    }
    pub fn tolerance() -> f64 {
        1e-9
    }
}

pub const HOLDER_PREFIX: &str = "holder";
pub const TRADER_PREFIX: &str = "trader";
pub const HOARDER_PREFIX: &str = "hoarder";

pub fn account_name(prefix: &str, k: usize) -> String {
    format!("{prefix}-{k:03}")
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon < 1 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.assets.is_empty() {
            return Err(invalid("assets", "at least one asset is required"));
        }
        let mut ids: Vec<u32> = Vec::new();
        let mut symbols: Vec<&str> = Vec::new();
        for (k, a) in self.assets.iter().enumerate() {
            let f = |name: &str| format!("assets[{k}].{name}");
            let id = a.id.unwrap_or(k as u32);
            if ids.contains(&id) || symbols.contains(&a.symbol.as_str()) {
                return Err(invalid(
                    &f("id"),
                    format!("duplicate asset {} / id {id}", a.symbol),
                ));
            }
            ids.push(id);
            symbols.push(&a.symbol);
            for (name, v) in [
                ("inventory", a.inventory),
                ("lp_inventory", a.lp_inventory),
                ("collateral_long", a.collateral_long),
                ("collateral_short", a.collateral_short),
                ("depth_slope", a.depth_slope),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(invalid(
                        &f(name),
                        format!("must be finite and non-negative (got {v})"),
                    ));
                }
            }
            if !(a.coll_rate > 0.0 && a.coll_rate <= 1.0) {
                return Err(invalid(
                    &f("coll_rate"),
                    format!("must lie in (0, 1] (got {})", a.coll_rate),
                ));
            }
            if !(a.price > 0.0 && a.price.is_finite()) {
                return Err(invalid(&f("price"), "must be positive"));
            }
        }
        if self.initial_supply() < 0.0 {
            return Err(invalid(
                "assets",
                "net open inventory must be non-negative to back the initial supply",
            ));
        }
        if !(self.treasury.is_finite() && self.treasury >= 0.0) {
            return Err(invalid("treasury", "must be finite and non-negative"));
        }
        let p = &self.policy;
        if !(p.base_target > 0.0 && p.base_target < p.pmo.m_threshold) {
            return Err(invalid(
                "policy.base_target",
                "must lie in (0, pmo.m_threshold)",
            ));
        }
        p.fee.validate().map_err(|e| invalid("policy.fee", e))?;
        p.pmo.validate().map_err(|e| invalid("policy.pmo", e))?;
        p.lever.validate().map_err(|e| invalid("policy.lever", e))?;
        p.correlation
            .validate()
            .map_err(|e| invalid("policy.correlation", e))?;
        p.es.validate().map_err(|e| invalid("policy.es", e))?;
        p.regime
            .validate()
            .map_err(|e| invalid("policy.regime", e))?;
        p.optimizer
            .validate()
            .map_err(|e| invalid("policy.optimizer", e))?;
        if !(0.0..=1.0).contains(&p.treasury_fee_share) {
            return Err(invalid("policy.treasury_fee_share", "must lie in [0, 1]"));
        }
        if p.return_window < 2 {
            return Err(invalid("policy.return_window", "must be at least 2"));
        }
        self.return_model().map_err(|e| invalid("price_model", e))?;

        let ag = &self.agents;
        let t = &ag.traders;
        if !(t.trades_per_epoch.is_finite() && t.trades_per_epoch >= 0.0) {
            return Err(invalid(
                "agents.traders.trades_per_epoch",
                "must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&t.p_buy) {
            return Err(invalid("agents.traders.p_buy", "must lie in [0, 1]"));
        }
        if !(t.mean_size > 0.0 && t.size_sigma >= 0.0 && t.fee_elasticity >= 0.0) {
            return Err(invalid(
                "agents.traders",
                "mean_size must be positive; size_sigma and fee_elasticity non-negative",
            ));
        }
        if t.trades_per_epoch > 0.0 && t.accounts == 0 {
            return Err(invalid(
                "agents.traders.accounts",
                "trading requires at least one account",
            ));
        }
        let h = &ag.hoarders;
        if h.hold_utility.len() != 1 && h.hold_utility.len() != h.population {
            return Err(invalid(
                "agents.hoarders.hold_utility",
                "needs one value or one per hoarder",
            ));
        }
        let shares = t.initial_share
            + if h.population > 0 {
                h.initial_share
            } else {
                0.0
            };
        if !(t.initial_share >= 0.0 && h.initial_share >= 0.0 && shares <= 1.0) {
            return Err(invalid(
                "agents",
                "initial shares must be non-negative and sum to at most 1",
            ));
        }
        if ag.holders.accounts == 0 && shares < 1.0 {
            return Err(invalid(
                "agents.holders.accounts",
                "needs at least one account to hold the remaining supply",
            ));
        }
        let s = &ag.slps;
        if s.vol_window < 2 {
            return Err(invalid("agents.slps.vol_window", "must be at least 2"));
        }
        if !((0.0..=1.0).contains(&s.reversion)
            && s.response_gain >= 0.0
            && s.noise_scale >= 0.0
            && (0.0..=1.0).contains(&s.floor_fraction))
        {
            return Err(invalid(
                "agents.slps",
                "reversion and floor_fraction in [0, 1]; gains non-negative",
            ));
        }
        if !(ag.plps.flow_scale >= 0.0) {
            return Err(invalid("agents.plps.flow_scale", "must be non-negative"));
        }
        let a = &self.auction;
        if !(a.premium_rate >= 0.0 && (0.0..=1.0).contains(&a.fill_fraction)) {
            return Err(invalid(
                "auction",
                "premium_rate non-negative and fill_fraction in [0, 1]",
            ));
        }
        for (k, s) in self.script.iter().enumerate() {
            if !self.assets.iter().any(|a| a.symbol == s.pool) {
                return Err(invalid(
                    &format!("script[{k}].pool"),
                    format!("unknown asset {}", s.pool),
                ));
            }
            if !(s.nominal > 0.0 && s.nominal.is_finite()) {
                return Err(invalid(&format!("script[{k}].nominal"), "must be positive"));
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        Ok(())
    }

    fn asset_id(&self, k: usize) -> u32 {
        self.assets[k].id.unwrap_or(k as u32)
    }

    /// Symbols in system order.
    pub fn symbols(&self) -> Vec<String> {
        self.sorted_asset_indices()
            .iter()
            .map(|k| self.assets[*k].symbol.clone())
            .collect()
    }

    /// Asset order used by the system: ascending id.
    pub fn sorted_asset_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.assets.len()).collect();
        idx.sort_by_key(|k| self.asset_id(*k));
        idx
    }

    fn pool_of(&self, k: usize) -> PoolState {
        let a = &self.assets[k];
        let mut pool = PoolState::new(
            AssetId::new(self.asset_id(k), a.symbol.clone()),
            a.inventory,
            a.lp_inventory,
            a.collateral_long,
            a.coll_rate,
            a.price,
        );
        pool.collateral_short = a.collateral_short;
        pool.density = LiquidityDensity {
            price: a.price,
            depth_slope: a.depth_slope,
        };
        pool.accounting_state = -pool.density.nominal(open_inventory(&pool));
        pool
    }

    /// Net open-inventory nominal, which backs the initial supply.
    pub fn initial_supply(&self) -> f64 {
        (0..self.assets.len())
            .map(|k| {
                let p = self.pool_of(k);
                p.density.nominal(open_inventory(&p))
            })
            .sum()
    }

    pub fn initial_state(&self) -> SystemState {
        let pools = self
            .sorted_asset_indices()
            .into_iter()
            .map(|k| self.pool_of(k))
            .collect();
        let supply = self.initial_supply().max(0.0);
        let ag = &self.agents;
        let mut ledger = HoldersLedger::default();
        let mut remaining = supply;
        if ag.traders.accounts > 0 && ag.traders.initial_share > 0.0 {
            let each = supply * ag.traders.initial_share / ag.traders.accounts as f64;
            for k in 0..ag.traders.accounts {
                ledger.credit(&account_name(TRADER_PREFIX, k), each);
                remaining -= each;
            }
        }
        if ag.hoarders.population > 0 && ag.hoarders.initial_share > 0.0 {
            let each = supply * ag.hoarders.initial_share / ag.hoarders.population as f64;
            for k in 0..ag.hoarders.population {
                ledger.credit(&account_name(HOARDER_PREFIX, k), each);
                remaining -= each;
            }
        }
        if ag.holders.accounts > 0 {
            let weights: Vec<f64> = (0..ag.holders.accounts)
                .map(|k| ((k + 1) as f64).powf(ag.holders.skew))
                .collect();
            let total: f64 = weights.iter().sum();
            let last = ag.holders.accounts - 1;
            let mut given = 0.0;
            for (k, w) in weights.iter().enumerate() {
                let amount = if k == last {
                    (remaining - given).max(0.0)
                } else {
                    remaining * w / total
                };
                ledger.credit(&account_name(HOLDER_PREFIX, k), amount);
                given += amount;
            }
        }
        let mut state = SystemState::new(
            pools,
            ledger,
            self.treasury,
            self.policy.base_target,
            self.policy.fee.theta_0,
        );
        // The ledger sum can differ from the backing by rounding; the
        // backing is the reference.
        let drift = supply - state.ledger.total();
        if drift != 0.0 {
            if let Some((_, bal)) = state.ledger.balances.iter_mut().next_back() {
                *bal = (*bal + drift).max(0.0);
            }
            state.sync_supply();
        }
        state
    }

    /// Price dynamics in system (ascending id) order.
    pub fn return_model(&self) -> Result<ReturnModel, crate::market::MarketError> {
        let order = self.sorted_asset_indices();
        let dynamics = order.iter().map(|k| self.assets[*k].dynamics).collect();
        let corr = self.price_model.correlation.as_ref().map(|rows| {
            order
                .iter()
                .map(|i| {
                    order
                        .iter()
                        .map(|j| {
                            rows.get(*i)
                                .and_then(|r| r.get(*j))
                                .copied()
                                .unwrap_or(f64::NAN)
                        })
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>()
        });
        ReturnModel::new(dynamics, corr.as_deref())
    }

    /// Loads the injected correlation matrix, resolved against `base_dir`.
    pub fn injected_correlation(
        &self,
        base_dir: &Path,
    ) -> Result<Option<CorrelationMatrix>, ConfigError> {
        let Some(rel) = &self.policy.correlation_file else {
            return Ok(None);
        };
        let path = if rel.is_absolute() {
            rel.clone()
        } else {
            base_dir.join(rel)
        };
        let file = std::fs::File::open(&path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        let symbols = self.symbols();
        CorrelationMatrix::from_csv(file, &symbols)
            .map(Some)
            .map_err(|e| {
                invalid(
                    "policy.correlation_file",
                    format!("{}: {e}", path.display()),
                )
            })
    }
}

/// Raw config tree: TOML for `.toml` files, JSON otherwise.
pub fn read_config_value(path: &Path) -> Result<toml::Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let mut de = serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Parse {
            path: format!("{}: {}", path.display(), e.path()),
            message: e.inner().to_string(),
        })
    } else {
        toml::from_str::<toml::Table>(&text)
            .map(toml::Value::Table)
            .map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }
}

/// Typed config from a raw tree, with the failing field path on error.
pub fn config_from_value(value: toml::Value) -> Result<ScenarioConfig, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Parses `key=value`. The value is read as a TOML literal and falls back
/// to a bare string.
pub fn parse_override(arg: &str) -> Result<(String, toml::Value), ConfigError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError::MalformedOverride(arg.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::MalformedOverride(arg.to_string()));
    }
    Ok((key.to_string(), parse_literal(raw.trim())))
}

pub fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Whether `key` names a field of the fully resolved config. Fields that
/// default to nothing (optional files, correlation) count as known.
fn key_is_known(resolved: &serde_json::Value, key: &str) -> bool {
    let mut node = resolved;
    for seg in key.split('.') {
        node = match node {
            serde_json::Value::Object(map) => match map.get(seg) {
                Some(v) => v,
                None => return false,
            },
            serde_json::Value::Array(items) => {
                match seg.parse::<usize>().ok().and_then(|i| items.get(i)) {
                    Some(v) => v,
                    None => return false,
                }
            }
            _ => return false,
        };
    }
    true
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let segs: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (depth, seg) in segs.iter().enumerate() {
        let last = depth + 1 == segs.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(seg.to_string(), value);
                    return Ok(());
                }
                t.entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(items) => {
                let i = seg
                    .parse::<usize>()
                    .map_err(|_| ConfigError::UnknownKey(key.to_string()))?;
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        };
    }
    Err(ConfigError::UnknownKey(key.to_string()))
}

/// Applies dotted-key overrides to a raw tree and returns the validated
/// config. Keys that do not name a config field are rejected.
pub fn resolve(
    mut raw: toml::Value,
    overrides: &[(String, toml::Value)],
) -> Result<ScenarioConfig, ConfigError> {
    if !overrides.is_empty() {
        let base = config_from_value(raw.clone())?;
        let resolved = serde_json::to_value(&base).expect("config serializes");
        for (key, value) in overrides {
            if !key_is_known(&resolved, key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
            set_path(&mut raw, key, value.clone())?;
        }
    }
    let config = config_from_value(raw)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(
    path: &Path,
    overrides: &[(String, toml::Value)],
) -> Result<ScenarioConfig, ConfigError> {
    resolve(read_config_value(path)?, overrides)
}

/// The fully resolved parameter set, defaults included, as TOML.
pub fn describe(config: &ScenarioConfig) -> String {
    toml::to_string_pretty(config).expect("config serializes to TOML")
}
