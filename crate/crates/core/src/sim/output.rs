//! Metrics rows, the event log and their file formats.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::policy::fee::{FeeCase, Side};
use crate::policy::pmo::{ConversionRegime, PmoActionKind};
use crate::state::SystemState;

/// Who initiated a trade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeSource {
    Trader,
    Script,
    Hoarder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Trade {
        epoch: u64,
        pool: String,
        account: String,
        source: TradeSource,
        side: Side,
        /// Peg-units deposited (buy) or IDA sold (sell).
        gross: f64,
        fee: f64,
        fee_case: FeeCase,
        /// Signed change in the account's IDA balance.
        ida: f64,
        util_before: f64,
        target: f64,
    },
    Pmo {
        epoch: u64,
        pool: String,
        action: PmoActionKind,
        fraction: f64,
        price: f64,
        util: f64,
        n_threshold: f64,
    },
    Conversion {
        epoch: u64,
        pool: String,
        regime: ConversionRegime,
        requested_fraction: f64,
        applied_fraction: f64,
        burned_ida: f64,
        issued_units: f64,
        units_per_ida: f64,
        truncated: bool,
    },
    Auction {
        epoch: u64,
        pool: String,
        counter_pool: String,
        units: f64,
        nominal: f64,
        premium: f64,
    },
    TargetRefresh {
        epoch: u64,
        targets: Vec<f64>,
        du: Vec<f64>,
        regime_scale: f64,
        optimizer_objective: Option<f64>,
        optimizer_es: Option<f64>,
        optimizer_feasible: Option<bool>,
    },
    Warning {
        epoch: u64,
        message: String,
    },
    EpochAborted {
        epoch: u64,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMetrics {
    pub price: f64,
    pub util: f64,
    pub fee: f64,
    pub collateral: f64,
    pub open_inventory: f64,
    pub target: f64,
    pub n_threshold: f64,
    pub velocity: f64,
    pub net_flow: f64,
    pub pmo: PmoActionKind,
}

/// One row per epoch, written after the epoch completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub circulating_supply: f64,
    pub treasury: f64,
    pub coverage: f64,
    pub capital_efficiency: f64,
    pub es: f64,
    pub psi: f64,
    pub delta_no: f64,
    pub delta_mn: f64,
    pub residual: f64,
    pub converted_ida: f64,
    pub aborted: bool,
    pub pools: Vec<PoolMetrics>,
}

const POOL_COLUMNS: [&str; 10] = [
    "price",
    "util",
    "fee",
    "collateral",
    "oi",
    "target",
    "n",
    "velocity",
    "net_flow",
    "pmo",
];

pub fn metrics_header(symbols: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "cs",
        "treasury",
        "coverage",
        "capital_efficiency",
        "es",
        "psi",
        "delta_no",
        "delta_mn",
        "residual",
        "converted_ida",
        "aborted",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for s in symbols {
        h.extend(POOL_COLUMNS.iter().map(|c| format!("{s}_{c}")));
    }
    h
}

fn action_label(kind: PmoActionKind) -> &'static str {
    match kind {
        PmoActionKind::None => "none",
        PmoActionKind::Announce => "announce",
        PmoActionKind::Rescind => "rescind",
        PmoActionKind::Execute => "execute",
    }
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.circulating_supply.to_string(),
            self.treasury.to_string(),
            self.coverage.to_string(),
            self.capital_efficiency.to_string(),
            self.es.to_string(),
            self.psi.to_string(),
            self.delta_no.to_string(),
            self.delta_mn.to_string(),
            self.residual.to_string(),
            self.converted_ida.to_string(),
            u8::from(self.aborted).to_string(),
        ];
        for p in &self.pools {
            r.extend([
                p.price.to_string(),
                p.util.to_string(),
                p.fee.to_string(),
                p.collateral.to_string(),
                p.open_inventory.to_string(),
                p.target.to_string(),
                p.n_threshold.to_string(),
                p.velocity.to_string(),
                p.net_flow.to_string(),
                action_label(p.pmo).to_string(),
            ]);
        }
        r
    }
}

pub fn write_metrics<W: Write>(out: W, symbols: &[String], rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(symbols))?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events<W: Write>(mut out: W, events: &[Event]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_snapshot<W: Write>(out: W, state: &SystemState) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(out, state)
}

/// Writes the three run artifacts into `dir` under the given file names.
pub fn write_outputs(
    dir: &Path,
    names: &super::config::OutputConfig,
    symbols: &[String],
    rows: &[MetricsRow],
    events: &[Event],
    state: &SystemState,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let open = |name: &str| std::fs::File::create(dir.join(name)).map(std::io::BufWriter::new);
    write_metrics(open(&names.metrics)?, symbols, rows).map_err(std::io::Error::other)?;
    write_events(open(&names.events)?, events)?;
    let mut snap = open(&names.final_state)?;
    write_snapshot(&mut snap, state).map_err(std::io::Error::other)?;
    snap.write_all(b"\n")?;
    snap.flush()
}
