//! Mini-batch SGD. Per-sample gradients are computed in parallel and summed
//! in sample order, so an epoch is bit-reproducible for any thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Gradients, Model};
use crate::quantizer::{quantize_model, QuantScheme};
use crate::regularizers::Regularizer;

#[derive(Debug, Clone, Copy)]
pub struct EpochOptions {
    pub lr: f32,
    pub batch_size: usize,
    /// Seed of this epoch's sample order.
    pub order_seed: u64,
}

/// One pass over `data`. Returns the mean task loss.
///
/// With `shadow` set, `model` holds float shadow weights: every batch runs
/// forward and backward on their quantized image and the gradient updates the
/// shadow (straight-through).
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    opts: EpochOptions,
    regularizer: Option<&Regularizer>,
    shadow: Option<&QuantScheme>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.order_seed));
    let mut total_loss = 0.0;
    for batch in order.chunks(opts.batch_size.max(1)) {
        let quantized;
        let net = match shadow {
            Some(scheme) => {
                quantized = quantize_model(model, scheme)?;
                &quantized
            }
            None => &*model,
        };
        let per_sample = batch
            .par_iter()
            .map(|&i| {
                let tape = net.forward_tape(data.image(i))?;
                net.backward(&tape, data.label(i))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::zeros_like(model);
        for (loss, g) in &per_sample {
            total_loss += loss;
            grads.add_assign(g);
        }
        grads.scale(1.0 / batch.len() as f32);
        if let Some(reg) = regularizer {
            reg.accumulate_gradient(model, &mut grads);
        }
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        model.apply_gradients(&grads, opts.lr);
    }
    let mean = total_loss / data.len() as f64;
    if !mean.is_finite() || !model.is_finite() {
        return Err(Error::Numerical("training diverged to NaN/Inf".into()));
    }
    Ok(mean)
}
