//! Differential crossbar mapping, vector-matrix products and fault injection.
//!
//! A weight layer becomes one [`CrossbarPair`]: `H` word-lines (inputs) by `B`
//! bit-lines (outputs) on two crossbars whose conductance difference is the
//! signed weight. Convolutions are unrolled into their doubly-block-Toeplitz
//! matrix so that `flattened input × matrix = flattened conv output`.
//! Biases stay digital and are added after the bit-line currents.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::quantizer::{is_quantized, max_level, quantize_value, QuantScheme};
use crate::seed::derive_seed;
use crate::tensor::{self, argmax, conv_output_dim, Tensor};

/// Fault state of one cell. A healthy cell is `CellFault::default()`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellFault {
    pub stuck_off: bool,
    /// Reduced highest reachable level after aging.
    pub max_level: Option<u32>,
    /// Additive conductance offset in weight units.
    pub drift: f32,
}

impl CellFault {
    pub fn is_healthy(&self) -> bool {
        !self.stuck_off && self.max_level.is_none() && self.drift == 0.0
    }
}

/// Positive and negative crossbars of one weight layer.
///
/// Cells are numbered `0..2·H·B`: the positive crossbar row-major first, then
/// the negative one.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarPair {
    rows: usize,
    cols: usize,
    bits: u32,
    scale: f32,
    /// Mean |quantized weight| of the source layer.
    mean_abs_weight: f32,
    pos: Vec<u32>,
    neg: Vec<u32>,
    faults: Vec<CellFault>,
}

impl CrossbarPair {
    /// Programs a pair from signed level indices laid out `H × B` row-major.
    pub fn from_indices(rows: usize, cols: usize, bits: u32, scale: f32, indices: &[i32]) -> Result<Self> {
        if indices.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} indices for a {rows}x{cols} crossbar",
                indices.len()
            )));
        }
        let top = max_level(bits);
        if let Some(k) = indices.iter().find(|k| k.unsigned_abs() > top) {
            return Err(Error::InvalidArgument(format!("level {k} exceeds {top} for {bits} bits")));
        }
        let (pos, neg) = indices
            .iter()
            .map(|&k| if k >= 0 { (k as u32, 0) } else { (0, k.unsigned_abs()) })
            .unzip();
        let mean_abs = if indices.is_empty() {
            0.0
        } else {
            indices.iter().map(|k| k.unsigned_abs() as f64).sum::<f64>() / indices.len() as f64 * scale as f64
        };
        Ok(Self {
            rows,
            cols,
            bits,
            scale,
            mean_abs_weight: mean_abs as f32,
            pos,
            neg,
            faults: vec![CellFault::default(); 2 * rows * cols],
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn mean_abs_weight(&self) -> f32 {
        self.mean_abs_weight
    }

    pub(crate) fn set_mean_abs_weight(&mut self, value: f32) {
        self.mean_abs_weight = value;
    }

    pub fn cell_count(&self) -> usize {
        2 * self.rows * self.cols
    }

    /// Programmed level of a cell, before faults.
    pub fn programmed(&self, cell: usize) -> u32 {
        let half = self.rows * self.cols;
        if cell < half {
            self.pos[cell]
        } else {
            self.neg[cell - half]
        }
    }

    pub fn fault(&self, cell: usize) -> &CellFault {
        &self.faults[cell]
    }

    pub fn faults(&self) -> &[CellFault] {
        &self.faults
    }

    pub fn clear_faults(&mut self) {
        self.faults.fill(CellFault::default());
    }

    /// Conductance a cell actually presents, never negative.
    pub fn effective(&self, cell: usize) -> f32 {
        let f = &self.faults[cell];
        if f.stuck_off {
            return 0.0;
        }
        let mut g = self.programmed(cell) as f32 * self.scale;
        if f.drift != 0.0 {
            g = (g + f.drift).max(0.0);
        }
        if let Some(top) = f.max_level {
            g = g.min(top as f32 * self.scale);
        }
        g
    }

    /// `G_pos,eff − G_neg,eff` as an `H × B` row-major matrix.
    pub fn conductance_difference(&self) -> Vec<f32> {
        let half = self.rows * self.cols;
        (0..half).map(|i| self.effective(i) - self.effective(i + half)).collect()
    }
}

/// Bit-line currents `I_j = Σ_i V_i (G_pos − G_neg)_ij` with faults applied.
pub fn vmm(voltages: &[f32], pair: &CrossbarPair) -> Result<Vec<f32>> {
    if voltages.len() != pair.rows {
        return Err(Error::Shape(format!(
            "{} voltages for {} word-lines",
            voltages.len(),
            pair.rows
        )));
    }
    Ok(contract(voltages, &pair.conductance_difference(), pair.cols))
}

/// Sums over word-lines in index order, in f64 like the direct layers, so a
/// healthy pair reproduces the direct layer computation bit for bit.
fn contract(voltages: &[f32], diff: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; cols];
    for (&v, row) in voltages.iter().zip(diff.chunks_exact(cols)) {
        for (acc, &g) in out.iter_mut().zip(row) {
            *acc += v as f64 * g as f64;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Placement of conv kernel taps in the unrolled matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unrolled {
    pub rows: usize,
    pub cols: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// `(row, col, kernel flat index)` for every nonzero position.
    pub taps: Vec<(usize, usize, usize)>,
}

/// Tap layout for a `[N, C, K, K]` kernel over a `C × M × N_cols` input.
/// Rows index the unpadded input (`c·M·N_cols + y·N_cols + x`); columns
/// index the output (`f·Ho·Wo + oy·Wo + ox`). Padded positions have no row.
pub fn unroll_layout(
    kernel_shape: &[usize],
    input_dims: (usize, usize),
    stride: (usize, usize),
    padding: usize,
) -> Result<Unrolled> {
    let &[filters, channels, k, kw] = kernel_shape else {
        return Err(Error::Shape(format!("kernel must be [N,C,K,K], got {kernel_shape:?}")));
    };
    if k != kw {
        return Err(Error::Shape(format!("kernel must be square, got {k}x{kw}")));
    }
    let (m, n) = input_dims;
    let out_h = conv_output_dim(m, k, stride.0, padding)?;
    let out_w = conv_output_dim(n, k, stride.1, padding)?;
    let rows = channels * m * n;
    let cols = filters * out_h * out_w;
    let mut taps = Vec::new();
    for f in 0..filters {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let col = (f * out_h + oy) * out_w + ox;
                for c in 0..channels {
                    for ky in 0..k {
                        let Some(iy) = source(oy * stride.0 + ky, padding, m) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = source(ox * stride.1 + kx, padding, n) else {
                                continue;
                            };
                            let row = (c * m + iy) * n + ix;
                            taps.push((row, col, ((f * channels + c) * k + ky) * k + kx));
                        }
                    }
                }
            }
        }
    }
    Ok(Unrolled {
        rows,
        cols,
        out_h,
        out_w,
        taps,
    })
}

#[inline]
fn source(pos: usize, padding: usize, limit: usize) -> Option<usize> {
    (pos >= padding && pos - padding < limit).then(|| pos - padding)
}

/// Doubly-block-Toeplitz matrix `[C·M·N_cols, N·Ho·Wo]` of a conv kernel.
pub fn unroll_conv(kernel: &Tensor, input_dims: (usize, usize), stride: (usize, usize), padding: usize) -> Result<Tensor> {
    let u = unroll_layout(kernel.shape(), input_dims, stride, padding)?;
    let mut m = vec![0.0f32; u.rows * u.cols];
    for &(r, c, t) in &u.taps {
        m[r * u.cols + c] = kernel.data()[t];
    }
    Tensor::new(vec![u.rows, u.cols], m)
}

/// Input shape seen by each weight layer, in weight-layer order.
fn weight_layer_inputs(model: &Model) -> Result<Vec<Vec<usize>>> {
    let mut shape = model.input_shape().to_vec();
    let mut inputs = Vec::new();
    for layer in model.layers() {
        if layer.spec.has_params() {
            inputs.push(shape.clone());
        }
        shape = layer.spec.output_shape(&shape)?;
    }
    Ok(inputs)
}

/// One pair per Conv/FC layer. The model must already sit on `scheme`'s grid.
pub fn map_model(model: &Model, scheme: &QuantScheme) -> Result<Vec<CrossbarPair>> {
    if !is_quantized(model, scheme) {
        return Err(Error::NotQuantized("weights are off the conductance level grid".into()));
    }
    let inputs = weight_layer_inputs(model)?;
    let mut pairs = Vec::with_capacity(inputs.len());
    for ((spec, p), (input, &scale)) in model
        .weight_specs()
        .into_iter()
        .zip(model.params())
        .zip(inputs.iter().zip(&scheme.scales))
    {
        let w = p.weight.data();
        let level = |v: f32| quantize_value(v, scale, scheme.clamp);
        let mut pair = match spec {
            LayerSpec::Fc { outputs, inputs } => {
                let mut idx = vec![0i32; inputs * outputs];
                for j in 0..outputs {
                    for i in 0..inputs {
                        idx[i * outputs + j] = level(w[j * inputs + i]);
                    }
                }
                CrossbarPair::from_indices(inputs, outputs, scheme.bits, scale, &idx)?
            }
            LayerSpec::Conv { stride, padding, .. } => {
                let u = unroll_layout(p.weight.shape(), (input[1], input[2]), (stride, stride), padding)?;
                let mut idx = vec![0i32; u.rows * u.cols];
                for &(r, c, t) in &u.taps {
                    idx[r * u.cols + c] = level(w[t]);
                }
                CrossbarPair::from_indices(u.rows, u.cols, scheme.bits, scale, &idx)?
            }
            _ => unreachable!("weight_specs yields Conv/FC only"),
        };
        let mean_abs = w.iter().map(|v| v.abs() as f64).sum::<f64>() / w.len().max(1) as f64;
        pair.set_mean_abs_weight(mean_abs as f32);
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Weight tensors recovered from the pairs' effective conductances. For
/// convolutions each kernel tap is read from its first unrolled position.
pub fn readout_weights(pairs: &[CrossbarPair], model: &Model) -> Result<Vec<Tensor>> {
    check_pairs(pairs, model)?;
    let inputs = weight_layer_inputs(model)?;
    let mut out = Vec::with_capacity(pairs.len());
    for ((spec, p), (pair, input)) in model.weight_specs().into_iter().zip(model.params()).zip(pairs.iter().zip(&inputs)) {
        let diff = pair.conductance_difference();
        let mut w = vec![0.0f32; p.weight.len()];
        match spec {
            LayerSpec::Fc { outputs, inputs } => {
                for j in 0..outputs {
                    for i in 0..inputs {
                        w[j * inputs + i] = diff[i * outputs + j];
                    }
                }
            }
            LayerSpec::Conv { stride, padding, .. } => {
                let u = unroll_layout(p.weight.shape(), (input[1], input[2]), (stride, stride), padding)?;
                let mut seen = vec![false; w.len()];
                for &(r, c, t) in &u.taps {
                    if !seen[t] {
                        seen[t] = true;
                        w[t] = diff[r * u.cols + c];
                    }
                }
            }
            _ => unreachable!("weight_specs yields Conv/FC only"),
        }
        out.push(Tensor::new(p.weight.shape().to_vec(), w)?);
    }
    Ok(out)
}

fn check_pairs(pairs: &[CrossbarPair], model: &Model) -> Result<()> {
    if pairs.len() != model.weight_layer_count() {
        return Err(Error::Shape(format!(
            "{} crossbar pairs for {} weight layers",
            pairs.len(),
            model.weight_layer_count()
        )));
    }
    Ok(())
}

/// Logits for one input with every Conv/FC layer evaluated on its pair.
pub fn crossbar_forward(pairs: &[CrossbarPair], model: &Model, input: &[f32]) -> Result<Vec<f32>> {
    check_pairs(pairs, model)?;
    let diffs: Vec<Vec<f32>> = pairs.iter().map(CrossbarPair::conductance_difference).collect();
    forward_with(&diffs, pairs, model, input)
}

fn forward_with(diffs: &[Vec<f32>], pairs: &[CrossbarPair], model: &Model, input: &[f32]) -> Result<Vec<f32>> {
    let mut x = Tensor::new(model.input_shape().to_vec(), input.to_vec())?;
    let mut ordinal = 0;
    for layer in model.layers() {
        x = match (&layer.spec, &layer.params) {
            (LayerSpec::Conv { .. } | LayerSpec::Fc { .. }, Some(p)) => {
                let pair = &pairs[ordinal];
                if x.len() != pair.rows {
                    return Err(Error::Shape(format!(
                        "layer input has {} values, crossbar has {} word-lines",
                        x.len(),
                        pair.rows
                    )));
                }
                let mut y = contract(x.data(), &diffs[ordinal], pair.cols);
                ordinal += 1;
                let shape = layer.spec.output_shape(x.shape())?;
                let plane = y.len() / p.bias.len();
                for (chunk, b) in y.chunks_mut(plane).zip(p.bias.data()) {
                    chunk.iter_mut().for_each(|v| *v += b);
                }
                Tensor::new(shape, y)?
            }
            (LayerSpec::Relu, _) => tensor::relu(&x),
            (LayerSpec::MaxPool { window }, _) => tensor::maxpool2d(&x, *window)?,
            _ => return Err(Error::Shape("layer is missing its parameters".into())),
        };
    }
    Ok(x.into_data())
}

/// Test accuracy with all Conv/FC layers running on their crossbars.
pub fn evaluate_on_crossbar(pairs: &[CrossbarPair], model: &Model, data: &Dataset) -> Result<f64> {
    check_pairs(pairs, model)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let diffs: Vec<Vec<f32>> = pairs.iter().map(CrossbarPair::conductance_difference).collect();
    let hits = (0..data.len())
        .into_par_iter()
        .map(|i| forward_with(&diffs, pairs, model, data.image(i)).map(|l| (argmax(&l) == data.label(i)) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    /// Variation range `r`; `δ` is drawn from `[0, r·Ŵ_l]`.
    pub r: f64,
    pub cell_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgingParams {
    pub cell_fraction: f64,
    pub levels_lost: u32,
}

/// Faults applied to one pair, by cell index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerFaults {
    pub stuck_off: Vec<usize>,
    /// `(cell, max_level)`.
    pub aged: Vec<(usize, u32)>,
    /// `(cell, signed conductance offset)`.
    pub drift: Vec<(usize, f32)>,
}

/// Replayable record of injected faults, one entry per pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultMask {
    pub seed: u64,
    pub layers: Vec<LayerFaults>,
}

impl FaultMask {
    /// Applies the recorded faults on top of whatever the pairs already hold.
    pub fn apply(&self, pairs: &mut [CrossbarPair]) -> Result<()> {
        if self.layers.len() != pairs.len() {
            return Err(Error::Shape(format!(
                "fault mask covers {} layers, model has {}",
                self.layers.len(),
                pairs.len()
            )));
        }
        for (pair, lf) in pairs.iter_mut().zip(&self.layers) {
            let n = pair.cell_count();
            let bad = lf
                .stuck_off
                .iter()
                .chain(lf.aged.iter().map(|(c, _)| c))
                .chain(lf.drift.iter().map(|(c, _)| c))
                .find(|&&c| c >= n);
            if let Some(c) = bad {
                return Err(Error::Shape(format!("fault cell {c} outside {n} cells")));
            }
            for &c in &lf.stuck_off {
                pair.faults[c].stuck_off = true;
            }
            for &(c, top) in &lf.aged {
                let f = &mut pair.faults[c];
                f.max_level = Some(f.max_level.map_or(top, |m| m.min(top)));
            }
            for &(c, d) in &lf.drift {
                pair.faults[c].drift += d;
            }
        }
        Ok(())
    }

    /// Concatenates the per-layer records of `other` onto `self`.
    pub fn merge(&mut self, other: FaultMask) {
        if self.layers.is_empty() {
            self.layers = vec![LayerFaults::default(); other.layers.len()];
        }
        for (mine, theirs) in self.layers.iter_mut().zip(other.layers) {
            mine.stuck_off.extend(theirs.stuck_off);
            mine.aged.extend(theirs.aged);
            mine.drift.extend(theirs.drift);
        }
    }

    pub fn affected_cells(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.stuck_off.len() + l.aged.len() + l.drift.len())
            .sum()
    }
}

/// `round(fraction · total)` with halves rounded up.
pub fn fault_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64 + 0.5).floor() as usize).min(total)
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {f}")));
    }
    Ok(())
}

fn pick_cells(rng: &mut ChaCha8Rng, total: usize, fraction: f64) -> Vec<usize> {
    let mut cells = sample(rng, total, fault_count(fraction, total)).into_vec();
    cells.sort_unstable();
    cells
}

fn layer_rng(seed: u64, tag: &str, layer: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, layer as u64))
}

/// Flags exactly `round(fraction · cells)` uniformly chosen cells of each
/// pair as stuck-off.
pub fn inject_stuck_off(pairs: &mut [CrossbarPair], fraction: f64, seed: u64) -> Result<FaultMask> {
    check_fraction("stuck-off fraction", fraction)?;
    let layers = pairs
        .iter()
        .enumerate()
        .map(|(l, p)| LayerFaults {
            stuck_off: pick_cells(&mut layer_rng(seed, "stuck_off", l), p.cell_count(), fraction),
            ..Default::default()
        })
        .collect();
    let mask = FaultMask { seed, layers };
    mask.apply(pairs)?;
    Ok(mask)
}

/// Normal(`mean`, `std`) restricted to `[lo, hi]` by rejection.
pub fn sample_truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if std <= 0.0 {
        return mean.clamp(lo, hi);
    }
    let normal = Normal::new(mean, std).expect("std is positive");
    loop {
        let x = normal.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
}

/// Offsets the selected cells by `±δ`, `δ ~ N(0.2·r·Ŵ, 0.1·r·Ŵ)` truncated to
/// `[0, r·Ŵ]`, with a fair-coin sign.
pub fn inject_drift(pairs: &mut [CrossbarPair], drift: DriftParams, seed: u64) -> Result<FaultMask> {
    check_fraction("drift cell fraction", drift.cell_fraction)?;
    if !(drift.r >= 0.0) || !drift.r.is_finite() {
        return Err(Error::InvalidArgument(format!("drift range must be >= 0, got {}", drift.r)));
    }
    let layers = pairs
        .iter()
        .enumerate()
        .map(|(l, p)| {
            if drift.r == 0.0 {
                return LayerFaults::default();
            }
            let mut rng = layer_rng(seed, "drift", l);
            let cells = pick_cells(&mut rng, p.cell_count(), drift.cell_fraction);
            let span = drift.r * p.mean_abs_weight as f64;
            let drift = cells
                .into_iter()
                .map(|c| {
                    let delta = sample_truncated_normal(&mut rng, 0.2 * span, 0.1 * span, 0.0, span);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    (c, (sign * delta) as f32)
                })
                .collect();
            LayerFaults {
                drift,
                ..Default::default()
            }
        })
        .collect();
    let mask = FaultMask { seed, layers };
    mask.apply(pairs)?;
    Ok(mask)
}

/// Caps the selected cells at level `2^n − 1 − levels_lost`.
pub fn inject_aging(pairs: &mut [CrossbarPair], aging: AgingParams, seed: u64) -> Result<FaultMask> {
    check_fraction("aging cell fraction", aging.cell_fraction)?;
    let layers = pairs
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let top = max_level(p.bits);
            if aging.levels_lost > top {
                return Err(Error::InvalidArgument(format!(
                    "cannot lose {} of {} levels",
                    aging.levels_lost,
                    top + 1
                )));
            }
            if aging.levels_lost == 0 {
                return Ok(LayerFaults::default());
            }
            let cells = pick_cells(&mut layer_rng(seed, "aging", l), p.cell_count(), aging.cell_fraction);
            Ok(LayerFaults {
                aged: cells.into_iter().map(|c| (c, top - aging.levels_lost)).collect(),
                ..Default::default()
            })
        })
        .collect::<Result<_>>()?;
    let mask = FaultMask { seed, layers };
    mask.apply(pairs)?;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::quantize_model;

    fn pair_from(rows: usize, cols: usize, idx: &[i32]) -> CrossbarPair {
        CrossbarPair::from_indices(rows, cols, 8, 1.0, idx).unwrap()
    }

    #[test]
    fn identity_pair_passes_voltages() {
        let p = pair_from(3, 3, &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
        assert_eq!(vmm(&[0.3, -2.0, 7.5], &p).unwrap(), vec![0.3, -2.0, 7.5]);
    }

    #[test]
    fn hand_dot_product() {
        // effective G = [[1, 0], [0.5, 0.25]] with period 0.25
        let p = CrossbarPair::from_indices(2, 2, 4, 0.25, &[4, 0, 2, 1]).unwrap();
        assert_eq!(vmm(&[1.0, 2.0], &p).unwrap(), vec![2.0, 0.5]);
    }

    #[test]
    fn vmm_rejects_wrong_length() {
        let p = pair_from(2, 2, &[1, 2, 3, 4]);
        assert!(matches!(vmm(&[1.0], &p), Err(Error::Shape(_))));
    }

    #[test]
    fn all_stuck_off_gives_zero_current() {
        let mut pairs = vec![pair_from(2, 3, &[5, -3, 1, 0, 7, -7])];
        inject_stuck_off(&mut pairs, 1.0, 9).unwrap();
        assert_eq!(vmm(&[1.5, -4.0], &pairs[0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn stuck_off_counts() {
        let mut pairs = vec![pair_from(1, 2, &[1, -1])];
        let mask = inject_stuck_off(&mut pairs, 0.5, 3).unwrap();
        assert_eq!(mask.layers[0].stuck_off.len(), 2);
        assert_eq!(pairs[0].faults().iter().filter(|f| f.stuck_off).count(), 2);
        let mut clean = vec![pair_from(1, 2, &[1, -1])];
        let before = clean.clone();
        inject_stuck_off(&mut clean, 0.0, 3).unwrap();
        assert_eq!(clean, before);
        assert_eq!(fault_count(0.125, 4), 1); // 0.5 rounds up
        assert_eq!(fault_count(0.1, 4), 0);
    }

    #[test]
    fn aging_clips_to_reduced_ceiling() {
        let mut pairs = vec![pair_from(1, 2, &[255, 10])];
        inject_aging(
            &mut pairs,
            AgingParams {
                cell_fraction: 1.0,
                levels_lost: 4,
            },
            1,
        )
        .unwrap();
        assert_eq!(pairs[0].effective(0), 251.0);
        assert_eq!(pairs[0].effective(1), 10.0);
        let mut fresh = vec![pair_from(1, 2, &[255, 10])];
        let before = fresh.clone();
        inject_aging(
            &mut fresh,
            AgingParams {
                cell_fraction: 0.0,
                levels_lost: 4,
            },
            1,
        )
        .unwrap();
        assert_eq!(fresh, before);
        assert!(inject_aging(
            &mut fresh,
            AgingParams {
                cell_fraction: 0.5,
                levels_lost: 256,
            },
            1
        )
        .is_err());
    }

    #[test]
    fn drift_noops() {
        let base = vec![pair_from(2, 2, &[3, -1, 0, 8])];
        for params in [
            DriftParams { r: 0.0, cell_fraction: 0.5 },
            DriftParams { r: 1.0, cell_fraction: 0.0 },
        ] {
            let mut p = base.clone();
            inject_drift(&mut p, params, 4).unwrap();
            assert_eq!(p, base);
        }
    }

    #[test]
    fn drift_keeps_conductance_nonnegative() {
        let mut p = vec![pair_from(4, 4, &[1, -1, 0, 2, 0, 0, 3, -3, 1, 1, 1, 1, 0, 0, 0, 0])];
        inject_drift(&mut p, DriftParams { r: 50.0, cell_fraction: 1.0 }, 12).unwrap();
        assert!((0..p[0].cell_count()).all(|c| p[0].effective(c) >= 0.0));
        assert!(p[0].faults().iter().any(|f| f.drift != 0.0));
    }

    #[test]
    fn injection_is_seeded() {
        let base = vec![pair_from(4, 4, &[1; 16])];
        let run = |seed| {
            let mut p = base.clone();
            inject_drift(&mut p, DriftParams { r: 1.0, cell_fraction: 0.4 }, seed).unwrap();
            inject_stuck_off(&mut p, 0.3, seed).unwrap();
            p
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn mask_replay_reproduces_faults() {
        let base = vec![pair_from(3, 3, &[1, 2, 3, -4, -5, -6, 7, 0, 0])];
        let mut injected = base.clone();
        let mut mask = inject_stuck_off(&mut injected, 0.2, 5).unwrap();
        mask.merge(inject_drift(&mut injected, DriftParams { r: 2.0, cell_fraction: 0.5 }, 5).unwrap());
        let json = serde_json::to_string(&mask).unwrap();
        let back: FaultMask = serde_json::from_str(&json).unwrap();
        let mut replayed = base.clone();
        back.apply(&mut replayed).unwrap();
        assert_eq!(replayed, injected);
    }

    #[test]
    fn unroll_small_case() {
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = unroll_conv(&k, (3, 3), (1, 1), 0).unwrap();
        assert_eq!(m.shape(), &[9, 4]);
        // column 0: k11 at row 0, k12 at row 1, k21 at row 3, k22 at row 4
        let col0: Vec<f32> = (0..9).map(|r| m.data()[r * 4]).collect();
        assert_eq!(col0, vec![1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        let r12 = col0.iter().position(|&v| v == 2.0).unwrap();
        let r21 = col0.iter().position(|&v| v == 3.0).unwrap();
        assert_eq!(r21 - r12 - 1, 3 - 2);
    }

    #[test]
    fn unroll_rejects_non_integral_output() {
        let k = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(unroll_conv(&k, (4, 4), (2, 2), 0).is_ok());
        assert!(unroll_conv(&k, (5, 5), (2, 2), 0).is_err());
    }

    #[test]
    fn map_requires_quantized_model() {
        let m = Model::desk_scale([1, 8, 8], 10, 2).unwrap();
        let s = QuantScheme::for_model(&m, 4, None).unwrap();
        assert!(matches!(map_model(&m, &s), Err(Error::NotQuantized(_))));
    }

    #[test]
    fn single_fc_shape() {
        let m = Model::new([64, 1, 1], vec![LayerSpec::Fc { outputs: 10, inputs: 64 }], 10, 3).unwrap();
        let s = QuantScheme::for_model(&m, 4, None).unwrap();
        let q = quantize_model(&m, &s).unwrap();
        let pairs = map_model(&q, &s).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].rows(), pairs[0].cols()), (64, 10));
    }

    #[test]
    fn healthy_mapping_round_trips() {
        let m = Model::desk_scale([1, 8, 8], 10, 5).unwrap();
        let s = QuantScheme::for_model(&m, 6, None).unwrap();
        let q = quantize_model(&m, &s).unwrap();
        let pairs = map_model(&q, &s).unwrap();
        for (w, p) in readout_weights(&pairs, &q).unwrap().iter().zip(q.params()) {
            assert_eq!(w, &p.weight);
        }
        let x: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        assert_eq!(crossbar_forward(&pairs, &q, &x).unwrap(), q.forward(&x).unwrap());
    }
}
