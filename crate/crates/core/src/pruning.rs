//! Magnitude pruning: unstructured and filter-shaped masks, the adaptive
//! per-layer prune/evaluate/undo loop, a single-pass global baseline and
//! sparsity reporting.
//!
//! Masks live in [`Params::mask`]; a masked weight is exactly zero and stays
//! so through later training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneParams {
    /// Initial pruning rate.
    pub lambda_p: f64,
    /// Share of the rate spent on unstructured pruning in Conv layers.
    pub mu: f64,
    /// Largest accepted validation accuracy loss per layer step.
    pub sigma: f64,
    /// Rate decay after an undo.
    pub gamma: f64,
    /// A layer gives up once the rate falls below this.
    pub lambda_min: f64,
    /// Keep the decayed rate for the next layer instead of resetting it.
    pub carry_lambda: bool,
}

impl Default for PruneParams {
    fn default() -> Self {
        Self {
            lambda_p: 0.5,
            mu: 0.7,
            sigma: 0.02,
            gamma: 0.5,
            lambda_min: 0.01,
            carry_lambda: false,
        }
    }
}

impl PruneParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("prune.{name} must be in [0, 1], got {v}")))
            }
        };
        unit("lambda_p", self.lambda_p)?;
        unit("mu", self.mu)?;
        if !self.sigma.is_finite() || self.sigma > 1.0 {
            return Err(Error::Config(format!("prune.sigma must be at most 1, got {}", self.sigma)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("prune.gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.lambda_min > 0.0) || !self.lambda_min.is_finite() {
            return Err(Error::Config(format!("prune.lambda_min must be positive, got {}", self.lambda_min)));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("pruning rate must be in [0, 1], got {rate}")))
    }
}

/// Masks the `count` unmasked weights of smallest magnitude, ties to the
/// lowest flat index. Returns how many were masked.
fn mask_smallest(params: &mut Params, count: usize) -> usize {
    let w = params.weight.data();
    let mut open: Vec<usize> = (0..w.len()).filter(|&i| !params.mask[i]).collect();
    open.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
    let count = count.min(open.len());
    for &i in &open[..count] {
        params.mask[i] = true;
    }
    params.apply_mask();
    count
}

/// Masks `⌊rate · unmasked⌋` of the smallest-magnitude unmasked weights.
pub fn unstructured_prune(params: &mut Params, rate: f64) -> Result<usize> {
    check_rate(rate)?;
    let open = params.mask.len() - params.masked_count();
    Ok(mask_smallest(params, (rate * open as f64).floor() as usize))
}

fn filter_len(params: &Params, spec: &LayerSpec) -> Result<(usize, usize)> {
    match spec {
        LayerSpec::Conv { filters, .. } => Ok((*filters, params.weight.len() / filters)),
        _ => Err(Error::InvalidArgument("filter pruning applies to Conv layers only".into())),
    }
}

/// Fully masks the `⌊rate · N⌋` not-yet-pruned filters with the smallest L1
/// norm, ties to the lowest filter index. Returns the filters masked.
pub fn filter_prune(spec: &LayerSpec, params: &mut Params, rate: f64) -> Result<usize> {
    check_rate(rate)?;
    let (n, len) = filter_len(params, spec)?;
    mask_filters(params, n, len, (rate * n as f64).floor() as usize)
}

fn mask_filters(params: &mut Params, n: usize, len: usize, count: usize) -> Result<usize> {
    let w = params.weight.data();
    let mut open: Vec<(usize, f64)> = (0..n)
        .filter(|&f| !params.mask[f * len..(f + 1) * len].iter().all(|&m| m))
        .map(|f| (f, w[f * len..(f + 1) * len].iter().map(|v| v.abs() as f64).sum()))
        .collect();
    open.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let count = count.min(open.len());
    for &(f, _) in &open[..count] {
        params.mask[f * len..(f + 1) * len].fill(true);
    }
    params.apply_mask();
    Ok(count)
}

/// One pruning attempt on weight layer `ordinal` at rate `rate`: Conv layers
/// get unstructured `rate·μ` then filter `rate·(1−μ)`; FC layers get
/// unstructured `rate·μ` only.
pub fn prune_layer(model: &mut Model, ordinal: usize, rate: f64, mu: f64) -> Result<()> {
    let (spec, params) = model
        .weight_layer_mut(ordinal)
        .ok_or_else(|| Error::InvalidArgument(format!("no weight layer {ordinal}")))?;
    unstructured_prune(params, rate * mu)?;
    if spec.is_conv() {
        filter_prune(&spec, params, rate * (1.0 - mu))?;
    }
    Ok(())
}

/// One evaluated attempt of the adaptive loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub layer: usize,
    pub rate: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOutcome {
    pub baseline: f64,
    pub steps: Vec<PruneStep>,
    pub report: SparsityReport,
}

/// Per layer, input to output: prune at rate `λ`, evaluate, and on a loss
/// above `σ` restore the layer and retry at `λ·γ`, until an attempt is
/// accepted or `λ < λ_min`. `eval` returns validation accuracy and is first
/// called on the unpruned model to fix the baseline.
pub fn adaptive_prune<F>(model: &Model, params: &PruneParams, mut eval: F) -> Result<(Model, AdaptiveOutcome)>
where
    F: FnMut(&Model) -> Result<f64>,
{
    params.validate()?;
    let mut model = model.clone();
    let baseline = eval(&model)?;
    let mut steps = Vec::new();
    let mut lambda = params.lambda_p;
    for ordinal in 0..model.weight_layer_count() {
        if !params.carry_lambda {
            lambda = params.lambda_p;
        }
        loop {
            let snapshot = model.weight_layer(ordinal).map(|(_, p)| p.clone()).expect("ordinal in range");
            prune_layer(&mut model, ordinal, lambda, params.mu)?;
            let accuracy = eval(&model)?;
            let loss = baseline - accuracy;
            let accepted = loss <= params.sigma;
            steps.push(PruneStep {
                layer: ordinal,
                rate: lambda,
                accuracy,
                loss,
                accepted,
            });
            if accepted {
                break;
            }
            *model.weight_layer_mut(ordinal).expect("ordinal in range").1 = snapshot;
            lambda *= params.gamma;
            if lambda < params.lambda_min {
                break;
            }
        }
    }
    let report = measure_sparsity(&model);
    Ok((
        model,
        AdaptiveOutcome {
            baseline,
            steps,
            report,
        },
    ))
}

/// Every weight layer pruned once at `rate`, with no accuracy feedback.
pub fn global_prune(model: &Model, rate: f64, mu: f64) -> Result<Model> {
    check_rate(rate)?;
    check_rate(mu)?;
    let mut out = model.clone();
    for ordinal in 0..out.weight_layer_count() {
        prune_layer(&mut out, ordinal, rate, mu)?;
    }
    Ok(out)
}

/// Prunes every layer to element sparsity `target`. Conv layers first lose
/// `⌊(1−μ)·target·N⌋` whole filters, then the smallest remaining weights;
/// FC layers are pruned unstructured.
pub fn prune_to_sparsity(model: &Model, target: f64, mu: f64) -> Result<Model> {
    check_rate(target)?;
    check_rate(mu)?;
    let mut out = model.clone();
    for p in out.params_mut().zip(model.weight_specs()) {
        let (params, spec) = p;
        if spec.is_conv() {
            let (n, len) = filter_len(params, &spec)?;
            mask_filters(params, n, len, ((1.0 - mu) * target * n as f64).floor() as usize)?;
        }
        let goal = (target * params.mask.len() as f64).round() as usize;
        let have = params.masked_count();
        mask_smallest(params, goal.saturating_sub(have));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub kind: String,
    pub elements: usize,
    pub zeros: usize,
    /// Percent of exactly-zero weights.
    pub element_sparsity: f64,
    pub filters: usize,
    pub zero_filters: usize,
    /// Percent of all-zero filters; `None` for FC layers.
    pub filter_sparsity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// Percent of zero weights over all Conv and FC layers.
    pub overall: f64,
    /// Percent of all-zero filters over all Conv layers.
    pub filter: f64,
    pub layers: Vec<LayerSparsity>,
}

impl SparsityReport {
    /// Per Conv layer filter sparsity, in layer order.
    pub fn conv_filter_profile(&self) -> Vec<f64> {
        self.layers.iter().filter_map(|l| l.filter_sparsity).collect()
    }
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Element and filter sparsity counted from exactly-zero weights.
pub fn measure_sparsity(model: &Model) -> SparsityReport {
    let mut layers = Vec::new();
    let (mut zeros, mut total, mut zero_filters, mut filters) = (0, 0, 0, 0);
    for (i, (spec, p)) in model.weight_specs().into_iter().zip(model.params()).enumerate() {
        let w = p.weight.data();
        let z = w.iter().filter(|&&v| v == 0.0).count();
        let groups = spec.group_count();
        let len = w.len() / groups;
        let zg = w.chunks(len).filter(|g| g.iter().all(|&v| v == 0.0)).count();
        zeros += z;
        total += w.len();
        if spec.is_conv() {
            zero_filters += zg;
            filters += groups;
        }
        layers.push(LayerSparsity {
            layer: i,
            kind: if spec.is_conv() { "conv" } else { "fc" }.into(),
            elements: w.len(),
            zeros: z,
            element_sparsity: percent(z, w.len()),
            filters: groups,
            zero_filters: zg,
            filter_sparsity: spec.is_conv().then(|| percent(zg, groups)),
        });
    }
    SparsityReport {
        overall: percent(zeros, total),
        filter: percent(zero_filters, filters),
        layers,
    }
}
