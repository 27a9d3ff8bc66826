//! Uniform conductance-level quantization and the differential (two-crossbar)
//! split of signed levels.
//!
//! A layer with period `p` and `n` bits represents `k·p` for
//! `k ∈ [-(2^n - 1), 2^n - 1]`: the magnitude goes on one crossbar of the pair
//! and the other holds zero, so no sign bit is spent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::regularizers::scale_from_range;
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Highest level index for `bits` bits: `2^n - 1`.
pub fn max_level(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u32,
    /// Clamp `a` applied when quantizing; defaults to `2^n - 1`.
    pub clamp_levels: Option<u32>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            clamp_levels: None,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::Config(format!(
                "quant.bits must be in {MIN_BITS}..={MAX_BITS}, got {}",
                self.bits
            )));
        }
        if let Some(a) = self.clamp_levels {
            if a == 0 || a > max_level(self.bits) {
                return Err(Error::Config(format!(
                    "quant.clamp_levels must be in 1..={}",
                    max_level(self.bits)
                )));
            }
        }
        Ok(())
    }

    pub fn clamp(&self) -> u32 {
        self.clamp_levels.unwrap_or_else(|| max_level(self.bits))
    }
}

/// Bit width, clamp and per weight layer level period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u32,
    pub clamp: u32,
    pub scales: Vec<f32>,
}

impl QuantScheme {
    pub fn new(bits: u32, clamp: u32, scales: Vec<f32>) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit width {bits} outside {MIN_BITS}..={MAX_BITS}")));
        }
        if clamp == 0 || clamp > max_level(bits) {
            return Err(Error::InvalidArgument(format!("clamp {clamp} outside 1..={}", max_level(bits))));
        }
        if scales.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("level periods must be positive and finite".into()));
        }
        Ok(Self { bits, clamp, scales })
    }

    /// Scheme for `model`: periods derive from the model's frozen level
    /// ranges when it has them, otherwise from [`calibrate_scale`].
    pub fn for_model(model: &Model, bits: u32, clamp: Option<u32>) -> Result<Self> {
        let scales = match model.level_ranges() {
            Some(ranges) => ranges.iter().map(|&r| scale_from_range(r, bits)).collect(),
            None => model.params().map(|p| calibrate_scale(p.weight.data(), bits)).collect(),
        };
        Self::new(bits, clamp.unwrap_or_else(|| max_level(bits)), scales)
    }

    pub fn from_config(model: &Model, config: &QuantConfig) -> Result<Self> {
        config.validate()?;
        Self::for_model(model, config.bits, config.clamp_levels)
    }
}

/// Signed level indices with their period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub indices: Vec<i32>,
    pub scale: f32,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.indices.iter().map(|&k| level_value(k, self.scale)).collect(),
        )
        .expect("indices match shape")
    }
}

#[inline]
pub fn level_value(index: i32, scale: f32) -> f32 {
    index as f32 * scale
}

/// Nearest level index, rounding half away from zero, clamped to `±clamp`.
#[inline]
pub fn quantize_value(w: f32, scale: f32, clamp: u32) -> i32 {
    let k = (w.abs() / scale).round().min(clamp as f32) as i32;
    if w < 0.0 {
        -k
    } else {
        k
    }
}

pub fn quantize(w: &Tensor, scale: f32, clamp: u32) -> QuantizedTensor {
    QuantizedTensor {
        indices: w.data().iter().map(|&v| quantize_value(v, scale, clamp)).collect(),
        scale,
        shape: w.shape().to_vec(),
    }
}

/// `(G_pos, G_neg)` level indices; exactly one side is nonzero per cell.
pub fn split_differential(q: &QuantizedTensor) -> (Vec<u32>, Vec<u32>) {
    q.indices
        .iter()
        .map(|&k| if k >= 0 { (k as u32, 0) } else { (0, k.unsigned_abs()) })
        .unzip()
}

/// `max|w| / (2^n - 1)`, or 1.0 for an all-zero tensor.
pub fn calibrate_scale(weights: &[f32], bits: u32) -> f32 {
    let max = weights.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    scale_from_range(max, bits)
}

/// Copy of `model` with every weight replaced by its quantized value under
/// `scheme`. Biases stay digital and are left untouched.
pub fn quantize_model(model: &Model, scheme: &QuantScheme) -> Result<Model> {
    check_scheme(model, scheme)?;
    let mut out = model.clone();
    for (p, &scale) in out.params_mut().zip(&scheme.scales) {
        for v in p.weight.data_mut() {
            *v = level_value(quantize_value(*v, scale, scheme.clamp), scale);
        }
        p.apply_mask();
    }
    Ok(out)
}

/// Quantized weights of every weight layer.
pub fn quantized_layers(model: &Model, scheme: &QuantScheme) -> Result<Vec<QuantizedTensor>> {
    check_scheme(model, scheme)?;
    Ok(model
        .params()
        .zip(&scheme.scales)
        .map(|(p, &s)| quantize(&p.weight, s, scheme.clamp))
        .collect())
}

fn check_scheme(model: &Model, scheme: &QuantScheme) -> Result<()> {
    if scheme.scales.len() != model.weight_layer_count() {
        return Err(Error::Shape(format!(
            "scheme has {} scales for {} weight layers",
            scheme.scales.len(),
            model.weight_layer_count()
        )));
    }
    Ok(())
}

/// Whether every weight already sits exactly on its level grid.
pub fn is_quantized(model: &Model, scheme: &QuantScheme) -> bool {
    check_scheme(model, scheme).is_ok()
        && model.params().zip(&scheme.scales).all(|(p, &s)| {
            p.weight
                .data()
                .iter()
                .all(|&v| level_value(quantize_value(v, s, scheme.clamp), s) == v)
        })
}

/// `‖W - quantize(W)‖₁` summed over all weight layers.
pub fn quantization_error_l1(model: &Model, scheme: &QuantScheme) -> f64 {
    model
        .params()
        .zip(&scheme.scales)
        .map(|(p, &s)| {
            p.weight
                .data()
                .iter()
                .map(|&v| (v as f64 - level_value(quantize_value(v, s, scheme.clamp), s) as f64).abs())
                .sum::<f64>()
        })
        .sum()
}
