//! Sawtooth, group sawtooth, L1 and group lasso penalties with their
//! subgradients, plus the per-epoch relaxation of the sawtooth coefficient.
//!
//! The sawtooth norm of a scalar `w` with level period `p` and clamp `a` is
//!
//! ```text
//! Γ(w, p, a) = | clamp(w/p, a) - floor(w/p + 1/2) |,   clamp(x, a) = max(-a, min(x, a))
//! ```
//!
//! It vanishes on the levels `k·p`, `|k| <= a`, and peaks at 0.5 halfway
//! between them. The group form applies `Γ` to the L2 norm of each filter
//! (Conv) or output row (FC), which makes an all-zero group a minimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, LayerSpec, Model};
use crate::quantizer::{calibrate_scale, max_level};

/// Relative tolerance within which `w/p` is treated as sitting exactly on a
/// level or half-level. Covers the rounding of `k·p` in `f32`/`f64`.
pub const LEVEL_SNAP: f64 = 2.5e-7;

fn snap_half(x: f64) -> f64 {
    let r = (2.0 * x).round() / 2.0;
    if (x - r).abs() <= LEVEL_SNAP * x.abs().max(1.0) {
        r
    } else {
        x
    }
}

#[inline]
fn gamma(w: f64, p: f64, a: u32) -> f64 {
    let x = snap_half(w / p);
    let a = a as f64;
    (x.clamp(-a, a) - (x + 0.5).floor()).abs()
}

/// Sawtooth norm of one scalar.
pub fn sawtooth(w: f64, p: f64, a: u32) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::InvalidArgument(format!("level period must be positive, got {p}")));
    }
    Ok(gamma(w, p, a))
}

/// Subgradient of [`sawtooth`] with respect to `w`: `±1/p` between levels,
/// zero on the clamped plateau, at levels, at half-levels and at the clamp
/// boundary.
pub fn sawtooth_subgradient(w: f64, p: f64, a: u32) -> f64 {
    let x = snap_half(w / p);
    if x.abs() >= a as f64 {
        return 0.0;
    }
    let frac = x - x.floor();
    if frac == 0.0 || frac == 0.5 {
        return 0.0;
    }
    let d = x - (x + 0.5).floor();
    d.signum() / p
}

/// `λ_s · decay^epoch`.
pub fn relax_lambda(lambda_s: f64, decay: f64, epoch: u32) -> f64 {
    lambda_s * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    GroupSawtooth,
    Sawtooth,
    GroupLasso,
    L1,
    None,
}

/// How the group sawtooth term treats a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// `Γ(‖W_lg‖₂)` per group.
    Norm,
    /// `Σ_{w ∈ W_lg} Γ(w)`, i.e. plain sawtooth summed group by group.
    Elementwise,
    /// Both of the above.
    #[default]
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub lambda_s: f64,
    pub decay: f64,
    /// Clamp `a` in level units; defaults to `2^n - 1`.
    pub clamp_levels: Option<u32>,
    /// Coefficient for the L1 and group lasso baselines.
    pub lambda_reg: f64,
    pub group_mode: GroupMode,
    pub regularize_fc: bool,
    /// `L_f`: number of leading weight layers regularized (all when unset).
    pub layers: Option<usize>,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::GroupSawtooth,
            lambda_s: 1e-4,
            decay: 0.8,
            clamp_levels: None,
            lambda_reg: 1e-4,
            group_mode: GroupMode::Combined,
            regularize_fc: true,
            layers: None,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self, bits: u32) -> Result<()> {
        if self.lambda_s < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::Config("regularizer coefficients must be non-negative".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("regularizer.decay must be in (0, 1], got {}", self.decay)));
        }
        if let Some(a) = self.clamp_levels {
            if a == 0 || a > max_level(bits) {
                return Err(Error::Config(format!(
                    "regularizer.clamp_levels must be in 1..={} for {bits}-bit levels",
                    max_level(bits)
                )));
            }
        }
        Ok(())
    }

    pub fn clamp(&self, bits: u32) -> u32 {
        self.clamp_levels.unwrap_or_else(|| max_level(bits))
    }
}

/// Per weight layer level periods, the shared clamp, and which layers the
/// penalty covers.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    pub periods: Vec<f64>,
    pub clamp: u32,
    pub active: Vec<bool>,
}

impl LevelGrid {
    /// Periods come from the model's frozen level ranges when present and
    /// are calibrated from the current weights otherwise.
    pub fn for_model(model: &Model, bits: u32, clamp: u32, regularize_fc: bool, layers: Option<usize>) -> Self {
        let l_f = layers.unwrap_or(model.regularized_layers()).min(model.weight_layer_count());
        let periods = model
            .params()
            .enumerate()
            .map(|(i, p)| match model.level_ranges() {
                Some(r) => scale_from_range(r[i], bits) as f64,
                None => calibrate_scale(p.weight.data(), bits) as f64,
            })
            .collect();
        let active = model
            .weight_specs()
            .iter()
            .enumerate()
            .map(|(i, s)| i < l_f && (regularize_fc || !matches!(s, LayerSpec::Fc { .. })))
            .collect();
        Self {
            periods,
            clamp,
            active,
        }
    }

    fn layers<'a>(&'a self, model: &'a Model) -> impl Iterator<Item = (usize, &'a [f32], f64)> + 'a {
        model
            .params()
            .enumerate()
            .filter(|(i, _)| self.active[*i])
            .map(|(i, p)| (i, p.weight.data(), self.periods[i]))
    }
}

pub(crate) fn scale_from_range(range: f32, bits: u32) -> f32 {
    if range > 0.0 {
        range / max_level(bits) as f32
    } else {
        1.0
    }
}

fn l2(values: &[f32]) -> f64 {
    values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// `λ_s Σ_l Σ_g Γ(W_lg, p_l, a)` over the active layers.
pub fn group_sawtooth_loss(model: &Model, grid: &LevelGrid, lambda_s: f64, mode: GroupMode) -> f64 {
    let mut total = 0.0;
    for g in model.parameter_groups() {
        if !grid.active[g.layer] {
            continue;
        }
        let (_, params) = model.weight_layer(g.layer).expect("group layer exists");
        let slice = &params.weight.data()[g.offset..g.offset + g.len];
        let p = grid.periods[g.layer];
        if matches!(mode, GroupMode::Norm | GroupMode::Combined) {
            total += gamma(l2(slice), p, grid.clamp);
        }
        if matches!(mode, GroupMode::Elementwise | GroupMode::Combined) {
            total += slice.iter().map(|&w| gamma(w as f64, p, grid.clamp)).sum::<f64>();
        }
    }
    lambda_s * total
}

pub fn group_sawtooth_gradient(model: &Model, grid: &LevelGrid, lambda_s: f64, mode: GroupMode, grads: &mut Gradients) {
    for g in model.parameter_groups() {
        if !grid.active[g.layer] {
            continue;
        }
        let (_, params) = model.weight_layer(g.layer).expect("group layer exists");
        let slice = &params.weight.data()[g.offset..g.offset + g.len];
        let out = &mut grads.layers[g.layer].weight[g.offset..g.offset + g.len];
        let p = grid.periods[g.layer];
        if matches!(mode, GroupMode::Norm | GroupMode::Combined) {
            let norm = l2(slice);
            // ‖·‖₂ is not differentiable at 0; treated as zero gradient
            if norm > 0.0 {
                let outer = lambda_s * sawtooth_subgradient(norm, p, grid.clamp) / norm;
                for (o, &w) in out.iter_mut().zip(slice) {
                    *o += (outer * w as f64) as f32;
                }
            }
        }
        if matches!(mode, GroupMode::Elementwise | GroupMode::Combined) {
            for (o, &w) in out.iter_mut().zip(slice) {
                *o += (lambda_s * sawtooth_subgradient(w as f64, p, grid.clamp)) as f32;
            }
        }
    }
}

/// Mean elementwise `Γ` over the weights of the active layers.
pub fn mean_sawtooth(model: &Model, grid: &LevelGrid) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (_, w, p) in grid.layers(model) {
        sum += w.iter().map(|&v| gamma(v as f64, p, grid.clamp)).sum::<f64>();
        count += w.len();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// `λ_reg Σ |w|` over the active layers.
pub fn l1_penalty(model: &Model, grid: &LevelGrid, lambda_reg: f64) -> f64 {
    lambda_reg
        * grid
            .layers(model)
            .map(|(_, w, _)| w.iter().map(|&v| (v as f64).abs()).sum::<f64>())
            .sum::<f64>()
}

pub fn l1_gradient(model: &Model, grid: &LevelGrid, lambda_reg: f64, grads: &mut Gradients) {
    for (i, w, _) in grid.layers(model) {
        for (o, &v) in grads.layers[i].weight.iter_mut().zip(w) {
            if v != 0.0 {
                *o += (lambda_reg * (v as f64).signum()) as f32;
            }
        }
    }
}

/// `λ_reg Σ_g ‖W_lg‖₂` over the active layers.
pub fn group_lasso_penalty(model: &Model, grid: &LevelGrid, lambda_reg: f64) -> f64 {
    lambda_reg
        * model
            .parameter_groups()
            .into_iter()
            .filter(|g| grid.active[g.layer])
            .map(|g| {
                let (_, p) = model.weight_layer(g.layer).expect("group layer exists");
                l2(&p.weight.data()[g.offset..g.offset + g.len])
            })
            .sum::<f64>()
}

pub fn group_lasso_gradient(model: &Model, grid: &LevelGrid, lambda_reg: f64, grads: &mut Gradients) {
    for g in model.parameter_groups() {
        if !grid.active[g.layer] {
            continue;
        }
        let (_, p) = model.weight_layer(g.layer).expect("group layer exists");
        let slice = &p.weight.data()[g.offset..g.offset + g.len];
        let norm = l2(slice);
        if norm == 0.0 {
            continue;
        }
        let out = &mut grads.layers[g.layer].weight[g.offset..g.offset + g.len];
        for (o, &w) in out.iter_mut().zip(slice) {
            *o += (lambda_reg * w as f64 / norm) as f32;
        }
    }
}

/// A configured penalty bound to a model's level grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub group_mode: GroupMode,
    pub grid: LevelGrid,
    /// `λ_s` for the sawtooth kinds, `λ_reg` for L1 and group lasso.
    pub lambda: f64,
}

impl Regularizer {
    pub fn from_config(config: &RegularizerConfig, model: &Model, bits: u32) -> Result<Self> {
        config.validate(bits)?;
        let grid = LevelGrid::for_model(model, bits, config.clamp(bits), config.regularize_fc, config.layers);
        let lambda = match config.kind {
            RegularizerKind::GroupSawtooth | RegularizerKind::Sawtooth => config.lambda_s,
            RegularizerKind::GroupLasso | RegularizerKind::L1 => config.lambda_reg,
            RegularizerKind::None => 0.0,
        };
        Ok(Self {
            kind: config.kind,
            group_mode: config.group_mode,
            grid,
            lambda,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    pub fn penalty(&self, model: &Model) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        match self.kind {
            RegularizerKind::GroupSawtooth => group_sawtooth_loss(model, &self.grid, self.lambda, self.group_mode),
            RegularizerKind::Sawtooth => group_sawtooth_loss(model, &self.grid, self.lambda, GroupMode::Elementwise),
            RegularizerKind::GroupLasso => group_lasso_penalty(model, &self.grid, self.lambda),
            RegularizerKind::L1 => l1_penalty(model, &self.grid, self.lambda),
            RegularizerKind::None => 0.0,
        }
    }

    pub fn accumulate_gradient(&self, model: &Model, grads: &mut Gradients) {
        if self.lambda == 0.0 {
            return;
        }
        match self.kind {
            RegularizerKind::GroupSawtooth => {
                group_sawtooth_gradient(model, &self.grid, self.lambda, self.group_mode, grads)
            }
            RegularizerKind::Sawtooth => {
                group_sawtooth_gradient(model, &self.grid, self.lambda, GroupMode::Elementwise, grads)
            }
            RegularizerKind::GroupLasso => group_lasso_gradient(model, &self.grid, self.lambda, grads),
            RegularizerKind::L1 => l1_gradient(model, &self.grid, self.lambda, grads),
            RegularizerKind::None => {}
        }
    }
}
