//! Metrics records, weight histograms and the files they are written to.
//!
//! Metric files are rewritten, never appended blindly: a command replaces the
//! records of the stages it produced and keeps the rest in canonical stage
//! order, so running stages one command at a time yields the same files as a
//! single full run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pruning::SparsityReport;

/// Canonical order of stage names in metric files.
pub const STAGE_ORDER: &[&str] = &[
    "initial",
    "regularized",
    "prune",
    "quantize",
    "finetune",
    "inject",
    "eval",
    "sweep",
];

fn stage_rank(stage: &str) -> usize {
    STAGE_ORDER.iter().position(|s| *s == stage).unwrap_or(STAGE_ORDER.len())
}

/// Fault and quantization setting under which an accuracy was measured.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultSnapshot {
    pub bits: u32,
    pub stuck_off: f64,
    pub drift_r: f64,
    pub drift_fraction: f64,
    pub aging_fraction: f64,
    pub aging_levels: u32,
    pub rep: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub epoch: u32,
    pub train_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Test accuracy with every weight layer evaluated on its crossbar.
    pub crossbar_accuracy: Option<f64>,
    /// Percent zero weights.
    pub sparsity: f64,
    /// Percent all-zero conv filters.
    pub filter_sparsity: f64,
    pub lambda_s: Option<f64>,
    pub mean_sawtooth: Option<f64>,
    pub quant_error: Option<f64>,
    pub faults: Option<FaultSnapshot>,
}

impl MetricsRecord {
    pub fn new(stage: &str, epoch: u32, sparsity: &SparsityReport) -> Self {
        Self {
            stage: stage.into(),
            epoch,
            sparsity: sparsity.overall,
            filter_sparsity: sparsity.filter,
            ..Default::default()
        }
    }
}

const CSV_HEADER: &str = "stage,epoch,train_loss,val_accuracy,test_accuracy,crossbar_accuracy,sparsity,filter_sparsity,\
lambda_s,mean_sawtooth,quant_error,bits,stuck_off,drift_r,drift_fraction,aging_fraction,aging_levels,rep,fault_seed";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_row(r: &MetricsRecord) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.stage,
        r.epoch,
        opt(r.train_loss),
        opt(r.val_accuracy),
        opt(r.test_accuracy),
        opt(r.crossbar_accuracy),
        r.sparsity,
        r.filter_sparsity,
        opt(r.lambda_s),
        opt(r.mean_sawtooth),
        opt(r.quant_error),
    );
    match &r.faults {
        Some(f) => write!(
            row,
            ",{},{},{},{},{},{},{},{}",
            f.bits, f.stuck_off, f.drift_r, f.drift_fraction, f.aging_fraction, f.aging_levels, f.rep, f.seed
        )
        .expect("writing to a String"),
        None => row.push_str(",,,,,,,,"),
    }
    row
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Replaces the records of every stage present in `records` and rewrites
/// `metrics.jsonl` and `metrics.csv` in `dir`.
pub fn write_metrics(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let jsonl = dir.join("metrics.jsonl");
    let mut all: Vec<MetricsRecord> = read_jsonl(&jsonl)?
        .into_iter()
        .filter(|old| !records.iter().any(|r| r.stage == old.stage))
        .collect();
    all.extend(records.iter().cloned());
    all.sort_by_key(|r| stage_rank(&r.stage));
    let mut json = String::new();
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &all {
        json.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        json.push('\n');
        csv.push_str(&csv_row(r));
        csv.push('\n');
    }
    fs::write(jsonl, json)?;
    fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

/// `sparsity.json` (one object) and `sparsity.csv` (one row per layer).
pub fn write_sparsity(dir: &Path, report: &SparsityReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(dir.join("sparsity.json"), json + "\n")?;
    let mut csv = String::from("layer,kind,elements,zeros,element_sparsity,filters,zero_filters,filter_sparsity\n");
    for l in &report.layers {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            l.layer,
            l.kind,
            l.elements,
            l.zeros,
            l.element_sparsity,
            l.filters,
            l.zero_filters,
            opt(l.filter_sparsity)
        )
        .expect("writing to a String");
    }
    fs::write(dir.join("sparsity.csv"), csv)?;
    Ok(())
}

/// Weight histogram in level units (`w / p_l`), pooled over weight layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

/// Bins of one tenth of a level.
pub const HIST_BIN: f64 = 0.1;

impl Histogram {
    /// Values beyond `±(clamp + 1)` levels land in the outermost bins.
    pub fn of_model(model: &Model, periods: &[f64], clamp: u32) -> Self {
        let span = clamp as f64 + 1.0;
        let bins = (2.0 * span / HIST_BIN).round() as usize;
        let mut counts = vec![0u64; bins];
        for (p, &period) in model.params().zip(periods) {
            for &w in p.weight.data() {
                let x = (w as f64 / period + span) / HIST_BIN;
                let b = (x.floor().max(0.0) as usize).min(bins - 1);
                counts[b] += 1;
            }
        }
        Self {
            lo: -span,
            bin_width: HIST_BIN,
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo + i as f64 * self.bin_width;
            writeln!(out, "{:.1},{:.1},{c}", lo, lo + self.bin_width).expect("writing to a String");
        }
        out
    }

    pub fn write(&self, dir: &Path, stage: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("hist_{stage}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Fraction of weights within `±tol·p_l` of a level `k·p_l`, `|k| <= clamp`.
pub fn level_mass(model: &Model, periods: &[f64], clamp: u32, tol: f64) -> f64 {
    let (mut near, mut total) = (0usize, 0usize);
    for (p, &period) in model.params().zip(periods) {
        for &w in p.weight.data() {
            let x = w as f64 / period;
            let k = x.round();
            if k.abs() <= clamp as f64 && (x - k).abs() <= tol {
                near += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        near as f64 / total as f64
    }
}
