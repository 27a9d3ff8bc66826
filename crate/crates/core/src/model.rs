//! CNN definition, layer-by-layer forward/backward, parameter grouping and
//! accuracy evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Fc {
        outputs: usize,
        inputs: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    /// Weight tensor shape: `N x C x K x K` for Conv, `N x C` for FC.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                filters,
                in_channels,
                kernel,
                ..
            } => Some(vec![filters, in_channels, kernel, kernel]),
            LayerSpec::Fc { outputs, inputs } => Some(vec![outputs, inputs]),
            _ => None,
        }
    }

    /// Number of weight groups (filters for Conv, rows for FC).
    pub fn group_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { filters, .. } => filters,
            LayerSpec::Fc { outputs, .. } => outputs,
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                filters,
                in_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = *input else {
                    return Err(Error::Shape(format!("conv layer needs [C,H,W] input, got {input:?}")));
                };
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv layer expects {in_channels} channels, got {c}"
                    )));
                }
                Ok(vec![
                    filters,
                    tensor::conv_output_dim(h, kernel, stride, padding)?,
                    tensor::conv_output_dim(w, kernel, stride, padding)?,
                ])
            }
            LayerSpec::Fc { outputs, inputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(Error::Shape(format!("fc layer expects {inputs} inputs, got {n}")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { window } => {
                let [c, h, w] = *input else {
                    return Err(Error::Shape(format!("pool layer needs [C,H,W] input, got {input:?}")));
                };
                if window == 0 || window > h || window > w {
                    return Err(Error::Shape(format!("pool window {window} does not fit {h}x{w}")));
                }
                Ok(vec![c, h / window, w / window])
            }
        }
    }
}

/// Trainable tensors of one Conv/FC layer plus its pruning mask
/// (`true` = pruned, held at exactly zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
    pub mask: Vec<bool>,
}

impl Params {
    pub fn apply_mask(&mut self) {
        for (w, &m) in self.weight.data_mut().iter_mut().zip(&self.mask) {
            if m {
                *w = 0.0;
            }
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Option<Params>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    num_classes: usize,
    /// Count of leading Conv/FC layers subject to regularization.
    regularized_layers: usize,
    /// Per weight layer `max |w|` frozen when regularized training starts;
    /// quantization scales derive from it so sawtooth minima stay on levels.
    level_ranges: Option<Vec<f32>>,
}

/// One filter (Conv) or one output row (FC) of a weight layer. `layer` is the
/// ordinal among weight layers, not the index into the full layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupView {
    pub layer: usize,
    pub group: usize,
    pub offset: usize,
    pub len: usize,
}

/// Per weight layer gradients, laid out like the weight and bias tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .params()
                .map(|p| LayerGrad {
                    weight: vec![0.0; p.weight.len()],
                    bias: vec![0.0; p.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Activations recorded by [`Model::forward_tape`] for a later backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    activations: Vec<Tensor>,
    pool_winners: Vec<Vec<usize>>,
}

impl Tape {
    pub fn logits(&self) -> Option<&Tensor> {
        self.activations.last()
    }
}

impl Model {
    /// Builds a model, checking that layer shapes compose, and initializes
    /// weights uniformly in `±sqrt(6 / (fan_in + fan_out))`. Biases start at 0.
    pub fn new(input_shape: [usize; 3], specs: Vec<LayerSpec>, num_classes: usize, seed: u64) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for spec in &specs {
            shape = spec.output_shape(&shape)?;
        }
        if shape != [num_classes] {
            return Err(Error::Shape(format!(
                "network output {shape:?} does not match {num_classes} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        let layers: Vec<Layer> = specs
            .into_iter()
            .map(|spec| {
                let params = spec.weight_shape().map(|wshape| {
                    let (fan_in, fan_out) = match spec {
                        LayerSpec::Conv {
                            filters,
                            in_channels,
                            kernel,
                            ..
                        } => (in_channels * kernel * kernel, filters * kernel * kernel),
                        LayerSpec::Fc { outputs, inputs } => (inputs, outputs),
                        _ => unreachable!(),
                    };
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    let n: usize = wshape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Params {
                        weight: Tensor::new(wshape, data).expect("shape product matches"),
                        bias: Tensor::zeros(vec![spec.group_count()]),
                        mask: vec![false; n],
                    }
                });
                Layer { spec, params }
            })
            .collect();
        let weight_layers = layers.iter().filter(|l| l.params.is_some()).count();
        Ok(Self {
            input_shape,
            layers,
            num_classes,
            regularized_layers: weight_layers,
            level_ranges: None,
        })
    }

    /// Reference desk-scale architecture: Conv(8, 3x3) → ReLU → MaxPool(2) →
    /// Conv(16, 3x3) → ReLU → MaxPool(2) → FC(num_classes). Convolutions use
    /// stride 1 and padding 1 so an 8x8 input yields a 16x2x2 = 64 feature FC.
    pub fn desk_scale(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = input_shape;
        let specs = vec![
            LayerSpec::Conv {
                filters: 8,
                in_channels: c,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Conv {
                filters: 16,
                in_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Fc {
                outputs: num_classes,
                inputs: 16 * (h / 4) * (w / 4),
            },
        ];
        Self::new(input_shape, specs, num_classes, seed)
    }

    /// Reassembles a model from stored parts (checkpoint loading).
    pub fn from_parts(
        input_shape: [usize; 3],
        layers: Vec<Layer>,
        num_classes: usize,
        regularized_layers: usize,
        level_ranges: Option<Vec<f32>>,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.spec.output_shape(&shape)?;
            match (layer.spec.weight_shape(), &layer.params) {
                (Some(ws), Some(p)) => {
                    if p.weight.shape() != ws.as_slice()
                        || p.bias.len() != layer.spec.group_count()
                        || p.mask.len() != p.weight.len()
                    {
                        return Err(Error::Shape("stored parameters do not match layer spec".into()));
                    }
                }
                (None, None) => {}
                _ => return Err(Error::Shape("parameter presence does not match layer kind".into())),
            }
        }
        if shape != [num_classes] {
            return Err(Error::Shape("network output does not match class count".into()));
        }
        let model = Self {
            input_shape,
            layers,
            num_classes,
            regularized_layers: 0,
            level_ranges,
        };
        let count = model.weight_layer_count();
        if regularized_layers > count {
            return Err(Error::Shape(format!(
                "{regularized_layers} regularized layers exceeds {count} weight layers"
            )));
        }
        if model.level_ranges.as_ref().is_some_and(|r| r.len() != count) {
            return Err(Error::Shape("level range count does not match weight layers".into()));
        }
        Ok(Self {
            regularized_layers,
            ..model
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weight_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.params.is_some()).count()
    }

    /// Indices (into [`Model::layers`]) of the Conv/FC layers, in order.
    pub fn weight_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.params.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn weight_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().filter(|l| l.params.is_some()).map(|l| l.spec).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Params> {
        self.layers.iter().filter_map(|l| l.params.as_ref())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Params> {
        self.layers.iter_mut().filter_map(|l| l.params.as_mut())
    }

    /// Spec and parameters of the `ordinal`-th weight layer.
    pub fn weight_layer(&self, ordinal: usize) -> Option<(LayerSpec, &Params)> {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref().map(|p| (l.spec, p)))
            .nth(ordinal)
    }

    pub fn weight_layer_mut(&mut self, ordinal: usize) -> Option<(LayerSpec, &mut Params)> {
        self.layers
            .iter_mut()
            .filter_map(|l| {
                let spec = l.spec;
                l.params.as_mut().map(|p| (spec, p))
            })
            .nth(ordinal)
    }

    pub fn regularized_layers(&self) -> usize {
        self.regularized_layers
    }

    pub fn set_regularized_layers(&mut self, count: usize) -> Result<()> {
        if count > self.weight_layer_count() {
            return Err(Error::InvalidArgument(format!(
                "L_f = {count} exceeds {} weight layers",
                self.weight_layer_count()
            )));
        }
        self.regularized_layers = count;
        Ok(())
    }

    pub fn level_ranges(&self) -> Option<&[f32]> {
        self.level_ranges.as_deref()
    }

    pub fn set_level_ranges(&mut self, ranges: Option<Vec<f32>>) {
        self.level_ranges = ranges;
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.weight.is_finite() && p.bias.is_finite())
    }

    fn check_input(&self, input: &[f32]) -> Result<Tensor> {
        let expected: usize = self.input_shape.iter().product();
        if input.len() != expected {
            return Err(Error::Shape(format!(
                "model expects {expected} input values ({:?}), got {}",
                self.input_shape,
                input.len()
            )));
        }
        Tensor::new(self.input_shape.to_vec(), input.to_vec())
    }

    fn apply_layer(layer: &Layer, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        match (layer.spec, &layer.params) {
            (LayerSpec::Conv { stride, padding, .. }, Some(p)) => {
                let mut y = tensor::conv2d(x, &p.weight, stride, padding)?;
                let plane = y.shape()[1] * y.shape()[2];
                for (n, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
                    let b = p.bias.data()[n];
                    chunk.iter_mut().for_each(|v| *v += b);
                }
                Ok((y, Vec::new()))
            }
            (LayerSpec::Fc { inputs, .. }, Some(p)) => {
                let flat = Tensor::new(vec![inputs], x.data().to_vec())?;
                Ok((tensor::linear(&flat, &p.weight, &p.bias)?, Vec::new()))
            }
            (LayerSpec::Relu, _) => Ok((tensor::relu(x), Vec::new())),
            (LayerSpec::MaxPool { window }, _) => tensor::maxpool2d_with_indices(x, window),
            _ => Err(Error::Shape("layer is missing its parameters".into())),
        }
    }

    /// Logits for one input image. Never mutates the model.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        let mut x = self.check_input(input)?;
        for layer in &self.layers {
            x = Self::apply_layer(layer, &x)?.0;
        }
        Ok(x.into_data())
    }

    pub fn forward_tape(&self, input: &[f32]) -> Result<Tape> {
        let mut tape = Tape {
            activations: vec![self.check_input(input)?],
            pool_winners: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let (y, winners) = Self::apply_layer(layer, tape.activations.last().expect("non-empty"))?;
            tape.activations.push(y);
            tape.pool_winners.push(winners);
        }
        Ok(tape)
    }

    /// Cross-entropy loss and parameter gradients for the recorded forward pass.
    pub fn backward(&self, tape: &Tape, label: usize) -> Result<(f64, Gradients)> {
        let logits = tape.logits().ok_or(Error::BackwardBeforeForward)?;
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::BackwardBeforeForward);
        }
        let loss = tensor::softmax_cross_entropy(logits, label)?;
        let grad = tensor::softmax_cross_entropy_backward(logits, label)?;
        Ok((loss, self.backward_from(tape, grad)?))
    }

    /// Backpropagates an arbitrary gradient with respect to the logits.
    pub fn backward_from(&self, tape: &Tape, grad_logits: Tensor) -> Result<Gradients> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::BackwardBeforeForward);
        }
        let mut grads = Gradients::zeros_like(self);
        let mut ordinal = self.weight_layer_count();
        let mut g = grad_logits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.activations[i];
            g = match (layer.spec, &layer.params) {
                (LayerSpec::Conv { stride, padding, .. }, Some(p)) => {
                    ordinal -= 1;
                    let plane = g.shape()[1] * g.shape()[2];
                    let lg = &mut grads.layers[ordinal];
                    for (n, chunk) in g.data().chunks(plane).enumerate() {
                        lg.bias[n] = chunk.iter().sum();
                    }
                    let (dx, dk) = tensor::conv2d_backward(input, &p.weight, stride, padding, &g)?;
                    lg.weight = dk.into_data();
                    dx
                }
                (LayerSpec::Fc { inputs, .. }, Some(p)) => {
                    ordinal -= 1;
                    let flat = Tensor::new(vec![inputs], input.data().to_vec())?;
                    let (dx, dw, db) = tensor::linear_backward(&flat, &p.weight, &g)?;
                    grads.layers[ordinal] = LayerGrad {
                        weight: dw.into_data(),
                        bias: db.into_data(),
                    };
                    dx.reshape(input.shape().to_vec())?
                }
                (LayerSpec::Relu, _) => tensor::relu_backward(input, &g)?,
                (LayerSpec::MaxPool { .. }, _) => {
                    tensor::maxpool2d_backward(input.shape(), &tape.pool_winners[i], &g)?
                }
                _ => return Err(Error::Shape("layer is missing its parameters".into())),
            };
        }
        Ok(grads)
    }

    /// Loads `grads` into the parameter gradient buffers (masked weights get
    /// zero gradient), runs one SGD step and re-applies the masks.
    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f32) {
        for (p, g) in self.params_mut().zip(&grads.layers) {
            for ((dst, &src), &m) in p.weight.grad_mut().iter_mut().zip(&g.weight).zip(&p.mask) {
                *dst = if m { 0.0 } else { src };
            }
            p.bias.grad_mut().copy_from_slice(&g.bias);
            tensor::sgd_step(&mut [&mut p.weight, &mut p.bias], learning_rate);
            p.apply_mask();
        }
    }

    /// One view per filter (Conv) or output row (FC); the views of a layer
    /// partition its weight tensor.
    pub fn parameter_groups(&self) -> Vec<GroupView> {
        let mut groups = Vec::new();
        for (ordinal, spec) in self.weight_specs().into_iter().enumerate() {
            let n = spec.group_count();
            let total: usize = spec.weight_shape().expect("weight layer").iter().product();
            let len = total / n;
            groups.extend((0..n).map(|g| GroupView {
                layer: ordinal,
                group: g,
                offset: g * len,
                len,
            }));
        }
        groups
    }

    pub fn predict(&self, input: &[f32]) -> Result<usize> {
        Ok(tensor::argmax(&self.forward(input)?))
    }

    /// Fraction of samples whose argmax logit equals the label.
    pub fn evaluate_accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "dataset images {:?} do not match model input {:?}",
                data.shape(),
                self.input_shape
            )));
        }
        let correct = (0..data.len())
            .into_par_iter()
            .map(|i| self.predict(data.image(i)).map(|p| usize::from(p == data.label(i))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / data.len() as f64)
    }
}
