//! Accuracy sweeps over one non-ideality axis. Each grid point re-maps the
//! model, injects fresh faults per repetition and evaluates on the crossbars.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::{evaluate_on_crossbar, inject_aging, inject_drift, inject_stuck_off, map_model, AgingParams, DriftParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pruning::measure_sparsity;
use crate::quantizer::{quantize_model, QuantScheme};
use crate::seed::derive_seed;

use super::config::FaultConfig;
use super::metrics::{FaultSnapshot, MetricsRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Quantization bit width; the source model is re-quantized per point.
    Bits,
    /// Drift range `r` on `faults.drift_fraction` of the cells.
    DriftR,
    /// Fraction of stuck-off cells.
    StuckFraction,
    /// Levels lost on `faults.aging_fraction` of the cells.
    Aging,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Bits => "bits",
            SweepAxis::DriftR => "drift_r",
            SweepAxis::StuckFraction => "stuck_fraction",
            SweepAxis::Aging => "aging",
        }
    }

    pub fn is_stochastic(self) -> bool {
        !matches!(self, SweepAxis::Bits)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bits" => Ok(SweepAxis::Bits),
            "drift_r" | "drift" => Ok(SweepAxis::DriftR),
            "stuck_fraction" | "stuck_off" => Ok(SweepAxis::StuckFraction),
            "aging" => Ok(SweepAxis::Aging),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?}; expected bits, drift_r, stuck_fraction or aging"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub mean: f64,
    /// Sample standard deviation over repetitions; 0 for one repetition.
    pub std: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<SweepSummary>,
}

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},mean_accuracy,std_accuracy,reps\n", self.axis.name());
        for s in &self.summary {
            writeln!(out, "{},{},{},{}", s.value, s.mean, s.std, s.reps).expect("writing to a String");
        }
        out
    }
}

/// What a sweep evaluates.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    /// Float model re-quantized by the bits axis.
    pub float_model: &'a Model,
    /// Quantized model and its scheme, mapped by the fault axes.
    pub quantized: &'a Model,
    pub scheme: &'a QuantScheme,
    pub data: &'a Dataset,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Runs `axis` over `grid`. Stochastic axes use `faults.reps` repetitions,
/// repetition `k` drawing its faults from the same seed at every grid point.
pub fn sweep(inputs: SweepInputs<'_>, faults: &FaultConfig, axis: SweepAxis, grid: &[f64], seed: u64) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let reps = if axis.is_stochastic() { faults.reps.max(1) } else { 1 };
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..reps).map(move |r| (g, r))).collect();
    let base_pairs = match axis {
        SweepAxis::Bits => None,
        _ => Some(map_model(inputs.quantized, inputs.scheme)?),
    };
    let results = jobs
        .par_iter()
        .map(|&(g, rep)| -> Result<MetricsRecord> {
            let value = grid[g];
            let rep_seed = derive_seed(seed, axis.name(), rep as u64);
            let mut snap = FaultSnapshot {
                bits: inputs.scheme.bits,
                rep,
                seed: rep_seed,
                ..Default::default()
            };
            let (accuracy, model) = match axis {
                SweepAxis::Bits => {
                    let bits = integral(value, "bits")?;
                    let scheme = QuantScheme::for_model(inputs.float_model, bits, None)?;
                    let q = quantize_model(inputs.float_model, &scheme)?;
                    let pairs = map_model(&q, &scheme)?;
                    snap.bits = bits;
                    (evaluate_on_crossbar(&pairs, &q, inputs.data)?, q)
                }
                _ => {
                    let mut pairs = base_pairs.clone().expect("fault axes map the model");
                    match axis {
                        SweepAxis::DriftR => {
                            let d = DriftParams {
                                r: value,
                                cell_fraction: faults.drift_fraction,
                            };
                            inject_drift(&mut pairs, d, rep_seed)?;
                            snap.drift_r = value;
                            snap.drift_fraction = faults.drift_fraction;
                        }
                        SweepAxis::StuckFraction => {
                            inject_stuck_off(&mut pairs, value, rep_seed)?;
                            snap.stuck_off = value;
                        }
                        SweepAxis::Aging => {
                            let levels = integral(value, "aging levels")?;
                            let a = AgingParams {
                                cell_fraction: faults.aging_fraction,
                                levels_lost: levels,
                            };
                            inject_aging(&mut pairs, a, rep_seed)?;
                            snap.aging_fraction = faults.aging_fraction;
                            snap.aging_levels = levels;
                        }
                        SweepAxis::Bits => unreachable!(),
                    }
                    (evaluate_on_crossbar(&pairs, inputs.quantized, inputs.data)?, inputs.quantized.clone())
                }
            };
            let mut r = MetricsRecord::new("sweep", g as u32, &measure_sparsity(&model));
            r.crossbar_accuracy = Some(accuracy);
            r.faults = Some(snap);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = grid
        .iter()
        .enumerate()
        .map(|(g, &value)| {
            let accs: Vec<f64> = results[g * reps..(g + 1) * reps]
                .iter()
                .map(|r| r.crossbar_accuracy.expect("set above"))
                .collect();
            let (mean, std) = mean_std(&accs);
            SweepSummary { value, mean, std, reps }
        })
        .collect();
    Ok(SweepOutcome {
        axis,
        records: results,
        summary,
    })
}

fn integral(value: f64, what: &str) -> Result<u32> {
    if value < 0.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
        return Err(Error::Config(format!("{what} must be a non-negative integer, got {value}")));
    }
    Ok(value as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_digits, CorpusParams};

    fn setup() -> (Model, Model, QuantScheme, Dataset) {
        let data = generate_digits(
            CorpusParams {
                per_class: 6,
                ..Default::default()
            },
            2,
        );
        let m = Model::desk_scale([1, 8, 8], 10, 2).unwrap();
        let s = QuantScheme::for_model(&m, 4, None).unwrap();
        let q = quantize_model(&m, &s).unwrap();
        (m, q, s, data)
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("bits".parse::<SweepAxis>().unwrap(), SweepAxis::Bits);
        assert_eq!("drift_r".parse::<SweepAxis>().unwrap(), SweepAxis::DriftR);
        assert!(matches!("voltage".parse::<SweepAxis>(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_stuck_fraction_equals_clean_accuracy() {
        let (m, q, s, data) = setup();
        let inputs = SweepInputs {
            float_model: &m,
            quantized: &q,
            scheme: &s,
            data: &data,
        };
        let out = sweep(inputs, &FaultConfig::default(), SweepAxis::StuckFraction, &[0.0, 0.5], 1).unwrap();
        let clean = q.evaluate_accuracy(&data).unwrap();
        assert_eq!(out.summary[0].mean, clean);
        assert_eq!(out.summary[0].std, 0.0);
        assert_eq!(out.records.len(), 10);
        assert_eq!(out.summary[1].reps, 5);
    }

    #[test]
    fn bits_axis_is_single_rep_and_validated() {
        let (m, q, s, data) = setup();
        let inputs = SweepInputs {
            float_model: &m,
            quantized: &q,
            scheme: &s,
            data: &data,
        };
        let out = sweep(inputs, &FaultConfig::default(), SweepAxis::Bits, &[2.0, 8.0], 1).unwrap();
        assert!(out.summary.iter().all(|p| p.reps == 1));
        assert!(sweep(inputs, &FaultConfig::default(), SweepAxis::Bits, &[2.5], 1).is_err());
        assert!(out.to_csv().starts_with("bits,mean_accuracy,std_accuracy,reps\n2,"));
    }

    #[test]
    fn sample_statistics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
