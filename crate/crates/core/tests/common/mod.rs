//! Independent f64 reference implementations used as test oracles. They are
//! written from the definitions, not from the library code paths: convolution
//! iterates the zero-padded input, pooling and losses are recomputed directly.
#![allow(dead_code)]

use prunix_core::model::{Gradients, LayerSpec, Model};
use prunix_core::regularizers::{GroupMode, LevelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Zero-padded copy of a `C × H × W` map.
pub fn pad(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> (Vec<f64>, usize, usize) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                out[(ch * hp + y + p) * wp + x_ + p] = x[(ch * h + y) * w + x_];
            }
        }
    }
    (out, hp, wp)
}

/// Direct convolution (cross-correlation) over the padded input. Returns the
/// output and its `(Ho, Wo)`.
pub fn conv2d_ref(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    (nf, ks): (usize, usize),
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let (xp, hp, wp) = pad(x, c, h, w, padding);
    let ho = (hp - ks) / stride + 1;
    let wo = (wp - ks) / stride + 1;
    let mut out = vec![0.0; nf * ho * wo];
    for f in 0..nf {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ch in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let xv = xp[(ch * hp + oy * stride + ky) * wp + ox * stride + kx];
                            s += xv * k[((f * c + ch) * ks + ky) * ks + kx];
                        }
                    }
                }
                out[(f * ho + oy) * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

/// Activation pattern of a forward pass: ReLU signs and pooling winners. Two
/// inputs with the same pattern lie on the same smooth piece of the network.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pattern {
    pub relu: Vec<bool>,
    pub pool: Vec<usize>,
}

/// f64 weights of a model, one `(weight, bias)` per weight layer.
pub fn weights_f64(model: &Model) -> Vec<(Vec<f64>, Vec<f64>)> {
    model
        .params()
        .map(|p| {
            (
                p.weight.data().iter().map(|&v| v as f64).collect(),
                p.bias.data().iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

/// f64 forward pass of `model`'s architecture with explicit weights.
pub fn forward_ref(model: &Model, weights: &[(Vec<f64>, Vec<f64>)], input: &[f64]) -> (Vec<f64>, Pattern) {
    let [c0, h0, w0] = model.input_shape();
    let (mut c, mut h, mut w) = (c0, h0, w0);
    let mut x = input.to_vec();
    let mut pattern = Pattern::default();
    let mut ordinal = 0;
    for layer in model.layers() {
        match layer.spec {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (wt, b) = &weights[ordinal];
                ordinal += 1;
                let (mut y, ho, wo) = conv2d_ref(&x, (c, h, w), wt, (filters, kernel), stride, padding);
                for f in 0..filters {
                    for v in &mut y[f * ho * wo..(f + 1) * ho * wo] {
                        *v += b[f];
                    }
                }
                x = y;
                (c, h, w) = (filters, ho, wo);
            }
            LayerSpec::Fc { outputs, inputs } => {
                let (wt, b) = &weights[ordinal];
                ordinal += 1;
                x = (0..outputs)
                    .map(|o| b[o] + (0..inputs).map(|i| wt[o * inputs + i] * x[i]).sum::<f64>())
                    .collect();
                (c, h, w) = (outputs, 1, 1);
            }
            LayerSpec::Relu => {
                pattern.relu.extend(x.iter().map(|&v| v > 0.0));
                x = x.iter().map(|&v| v.max(0.0)).collect();
            }
            LayerSpec::MaxPool { window } => {
                let (ho, wo) = (h / window, w / window);
                let mut y = Vec::with_capacity(c * ho * wo);
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let cells = (0..window * window).map(|t| {
                                let (dy, dx) = (t / window, t % window);
                                (ch * h + oy * window + dy) * w + ox * window + dx
                            });
                            let best = cells.fold(None::<usize>, |b, i| match b {
                                Some(j) if x[j] >= x[i] => Some(j),
                                _ => Some(i),
                            });
                            let best = best.expect("window is non-empty");
                            pattern.pool.push(best);
                            y.push(x[best]);
                        }
                    }
                }
                x = y;
                (h, w) = (ho, wo);
            }
        }
    }
    (x, pattern)
}

pub fn cross_entropy_ref(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// `Γ(w; p, a)` from its definition: distance between the clamped level
/// coordinate and the nearest level, halves rounding up.
pub fn gamma_ref(w: f64, p: f64, a: u32) -> f64 {
    let x = w / p;
    let clamped = x.max(-(a as f64)).min(a as f64);
    let nearest = if x - x.floor() >= 0.5 { x.floor() + 1.0 } else { x.floor() };
    (clamped - nearest).abs()
}

pub fn l2_ref(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rows of `[groups, len]` laid out contiguously.
pub fn groups(v: &[f64], count: usize) -> impl Iterator<Item = &[f64]> {
    v.chunks(v.len() / count)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// `|a − n| / max(|n|, floor)`: relative error that degrades to an absolute
/// one for near-zero references.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(floor)
}

pub fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Flat view of every weight and bias for finite differencing.
pub fn flatten(ws: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    ws.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect()
}

pub fn unflatten(flat: &[f64], like: &[(Vec<f64>, Vec<f64>)]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut at = 0;
    like.iter()
        .map(|(w, b)| {
            let wv = flat[at..at + w.len()].to_vec();
            at += w.len();
            let bv = flat[at..at + b.len()].to_vec();
            at += b.len();
            (wv, bv)
        })
        .collect()
}

/// Weights whose level coordinate stays 0.01 away from every multiple of 1/2,
/// some of them beyond the clamp.
pub fn kink_free(rng: &mut ChaCha8Rng, n: usize, p: f64, a: u32) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let x: f64 = rng.random_range(-(a as f64 + 2.0)..(a as f64 + 2.0));
            let frac = (2.0 * x).rem_euclid(1.0);
            if frac > 0.02 && frac < 0.98 && (x.abs() - a as f64).abs() > 0.01 {
                break (x * p) as f32;
            }
        })
        .collect()
}

pub fn small_model() -> Model {
    Model::new(
        [2, 4, 4],
        vec![
            LayerSpec::Conv {
                filters: 3,
                in_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Fc { outputs: 4, inputs: 48 },
        ],
        4,
        1,
    )
    .unwrap()
}

pub fn group_counts(model: &Model) -> Vec<usize> {
    model.weight_specs().iter().map(|s| s.group_count()).collect()
}

pub fn near_kink(v: f64, p: f64, a: u32) -> bool {
    let x = v / p;
    let frac = (2.0 * x).rem_euclid(1.0);
    frac < 0.02 || frac > 0.98 || (x.abs() - a as f64).abs() < 0.01
}

/// Model with elementwise weights and every group norm clear of sawtooth kinks.
pub fn regularizer_model(seed: u64, periods: &[f64], a: u32) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = small_model();
    let counts = group_counts(&model);
    for ((p, &period), &count) in model.params_mut().zip(periods).zip(&counts) {
        let len = p.weight.len() / count;
        for g in 0..count {
            loop {
                let w = kink_free(&mut rng, len, period / 3.0, a);
                let norm = l2_ref(&f64s(&w));
                if !near_kink(norm, period, a) && w.iter().all(|&v| !near_kink(v as f64, period, a)) {
                    p.weight.data_mut()[g * len..(g + 1) * len].copy_from_slice(&w);
                    break;
                }
            }
        }
    }
    model
}

pub fn sawtooth_loss_ref(model: &Model, flat: &[Vec<f64>], grid: &LevelGrid, lambda: f64, mode: GroupMode) -> f64 {
    let counts = group_counts(model);
    let mut total = 0.0;
    for (l, w) in flat.iter().enumerate() {
        let (p, a) = (grid.periods[l], grid.clamp);
        for g in groups(w, counts[l]) {
            if matches!(mode, GroupMode::Norm | GroupMode::Combined) {
                total += gamma_ref(l2_ref(g), p, a);
            }
            if matches!(mode, GroupMode::Elementwise | GroupMode::Combined) {
                total += g.iter().map(|&v| gamma_ref(v, p, a)).sum::<f64>();
            }
        }
    }
    lambda * total
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every weight; infinite if a bias picked up a gradient.
pub fn regularizer_error(
    model: &Model,
    analytic: &Gradients,
    loss: impl Fn(&[Vec<f64>]) -> f64,
    floor: f64,
    step: impl Fn(usize) -> f64,
) -> f64 {
    let flat: Vec<Vec<f64>> = model.params().map(|p| f64s(p.weight.data())).collect();
    let mut worst = 0.0f64;
    for l in 0..flat.len() {
        for i in 0..flat[l].len() {
            let h = step(l);
            let mut up = flat.clone();
            up[l][i] += h;
            let mut down = flat.clone();
            down[l][i] -= h;
            let n = (loss(&up) - loss(&down)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.layers[l].weight[i] as f64, n, floor));
        }
        if analytic.layers[l].bias.iter().any(|&b| b != 0.0) {
            return f64::INFINITY;
        }
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub max_err: f64,
}

/// Compares `model.backward` with central differences of the f64 forward
/// oracle on every `stride`-th parameter. Coordinates whose perturbation
/// changes the ReLU or pooling pattern sit on a kink and are skipped.
pub fn model_gradient_check(model: &Model, input: &[f32], label: usize, stride: usize) -> GradCheck {
    let tape = model.forward_tape(input).unwrap();
    let (_, grads) = model.backward(&tape, label).unwrap();
    let ws = weights_f64(model);
    let xin = f64s(input);
    let (_, base) = forward_ref(model, &ws, &xin);
    let analytic: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|g| g.weight.iter().chain(&g.bias).map(|&v| v as f64))
        .collect();
    let flat = flatten(&ws);
    let h = 1e-5;
    let mut out = GradCheck {
        checked: 0,
        skipped: 0,
        max_err: 0.0,
    };
    for i in (0..flat.len()).step_by(stride) {
        let probe = |delta: f64| {
            let mut v = flat.clone();
            v[i] += delta;
            forward_ref(model, &unflatten(&v, &ws), &xin)
        };
        let (lp, pp) = probe(h);
        let (lm, pm) = probe(-h);
        if pp != base || pm != base {
            out.skipped += 1;
            continue;
        }
        let n = (cross_entropy_ref(&lp, label) - cross_entropy_ref(&lm, label)) / (2.0 * h);
        out.max_err = out.max_err.max(rel_err(analytic[i], n, 1e-3));
        out.checked += 1;
    }
    out
}
