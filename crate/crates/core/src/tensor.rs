//! Dense row-major `f32` tensors and the forward/backward kernels used by the
//! convolutional layers.
//!
//! Image tensors are channels-first (`[C, H, W]`) and convolution kernels are
//! `[N, C, K, K]`. Every kernel accumulates in a fixed order so repeated calls
//! produce bit-identical results.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            grad: None,
        }
    }

    pub fn from_slice(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first access.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("{what} must be 3-d [C,H,W], got {s:?}"))),
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, kh, kw] => Ok((n, c, kh, kw)),
        ref s => Err(Error::Shape(format!("{what} must be 4-d [N,C,K,K], got {s:?}"))),
    }
}

/// Output extent of a strided, padded window sweep. Fails unless the window
/// tiles the padded extent exactly.
pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let padded = size + 2 * padding;
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::Shape(format!(
            "({size} - {kernel} + 2*{padding}) is not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c, h, w) = dims3(input, "conv2d input")?;
        let (n, kc, kh, kw) = dims4(kernel, "conv2d kernel")?;
        if kc != c {
            return Err(Error::Shape(format!(
                "kernel expects {kc} input channels, input has {c}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!("kernel must be square, got {kh}x{kw}")));
        }
        let out_h = conv_output_dim(h, kh, stride, padding)?;
        let out_w = conv_output_dim(w, kw, stride, padding)?;
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            filters: n,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Input coordinate touched by output `o` and kernel tap `k`, if inside the
    /// unpadded image.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = o * self.stride + k;
        if pos < self.padding || pos - self.padding >= limit {
            None
        } else {
            Some(pos - self.padding)
        }
    }
}

/// Cross-correlation of a `[C,H,W]` input with `[N,C,K,K]` filters, no bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let kk = g.kernel * g.kernel;
    let mut out = vec![0.0f32; g.filters * g.out_h * g.out_w];
    for n in 0..g.filters {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                // f64 accumulation: every f32 product is exact, one rounding at the end
                let mut acc = 0.0f64;
                for c in 0..g.channels {
                    let kbase = (n * g.channels + c) * kk;
                    let xbase = c * g.height * g.width;
                    for ky in 0..g.kernel {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..g.kernel {
                            let Some(ix) = g.source(ox, kx, g.width) else {
                                continue;
                            };
                            acc += x[xbase + iy * g.width + ix] as f64 * k[kbase + ky * g.kernel + kx] as f64;
                        }
                    }
                }
                out[(n * g.out_h + oy) * g.out_w + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![g.filters, g.out_h, g.out_w], out)
}

/// Returns `(d_input, d_kernel)` for [`conv2d`] given the upstream gradient.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    if grad_out.shape() != [g.filters, g.out_h, g.out_w] {
        return Err(Error::Shape(format!(
            "conv2d upstream gradient {:?} does not match output [{}, {}, {}]",
            grad_out.shape(),
            g.filters,
            g.out_h,
            g.out_w
        )));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let kk = g.kernel * g.kernel;
    let mut dx = vec![0.0f32; x.len()];
    let mut dk = vec![0.0f32; k.len()];
    for n in 0..g.filters {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let up = go[(n * g.out_h + oy) * g.out_w + ox];
                if up == 0.0 {
                    continue;
                }
                for c in 0..g.channels {
                    let kbase = (n * g.channels + c) * kk;
                    let xbase = c * g.height * g.width;
                    for ky in 0..g.kernel {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..g.kernel {
                            let Some(ix) = g.source(ox, kx, g.width) else {
                                continue;
                            };
                            let xi = xbase + iy * g.width + ix;
                            let ki = kbase + ky * g.kernel + kx;
                            dk[ki] += up * x[xi];
                            dx[xi] += up * k[ki];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

/// `out[n] = sum_c input[c] * weights[n, c] + bias[n]`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c) = match *weights.shape() {
        [n, c] => (n, c),
        ref s => return Err(Error::Shape(format!("linear weights must be 2-d, got {s:?}"))),
    };
    if input.len() != c {
        return Err(Error::Shape(format!(
            "linear expects {c} inputs, got {}",
            input.len()
        )));
    }
    if bias.len() != n {
        return Err(Error::Shape(format!("linear expects {n} biases, got {}", bias.len())));
    }
    let x = input.data();
    let w = weights.data();
    let out = (0..n)
        .map(|row| {
            let mut acc = 0.0f64;
            for (&xi, &wi) in x.iter().zip(&w[row * c..(row + 1) * c]) {
                acc += xi as f64 * wi as f64;
            }
            acc as f32 + bias.data()[row]
        })
        .collect();
    Tensor::new(vec![n], out)
}

/// Returns `(d_input, d_weights, d_bias)` for [`linear`].
pub fn linear_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c) = match *weights.shape() {
        [n, c] => (n, c),
        ref s => return Err(Error::Shape(format!("linear weights must be 2-d, got {s:?}"))),
    };
    if input.len() != c || grad_out.len() != n {
        return Err(Error::Shape("linear backward dimension mismatch".into()));
    }
    let x = input.data();
    let w = weights.data();
    let go = grad_out.data();
    let mut dx = vec![0.0f32; c];
    let mut dw = vec![0.0f32; n * c];
    for row in 0..n {
        let up = go[row];
        for col in 0..c {
            dw[row * c + col] = up * x[col];
            dx[col] += up * w[row * c + col];
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(vec![n, c], dw)?,
        Tensor::new(vec![n], go.to_vec())?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
        grad: None,
    }
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape("relu backward shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Non-overlapping max pooling. Trailing rows/columns that do not fill a
/// window are dropped.
pub fn maxpool2d(x: &Tensor, window: usize) -> Result<Tensor> {
    maxpool2d_with_indices(x, window).map(|(t, _)| t)
}

/// Max pooling that also reports, for every output cell, the flat input index
/// that won. Ties go to the first maximal element in row-major window order.
pub fn maxpool2d_with_indices(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = dims3(x, "maxpool input")?;
    if window == 0 || window > h || window > w {
        return Err(Error::Shape(format!(
            "pool window {window} does not fit a {h}x{w} map"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + (oy * window) * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ch * h * w + (oy * window + dy) * w + ox * window + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, idx))
}

pub fn maxpool2d_backward(input_shape: &[usize], winners: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if winners.len() != grad_out.len() {
        return Err(Error::Shape("maxpool backward index/gradient mismatch".into()));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in winners.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_label(logits: &Tensor, label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(())
}

/// `-ln(softmax(logits)[label])`, evaluated with a max-shifted log-sum-exp.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    check_label(logits, label)?;
    let max = logits.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = logits
        .data()
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    Ok(lse - logits.data()[label] as f64)
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits.
pub fn softmax_cross_entropy_backward(logits: &Tensor, label: usize) -> Result<Tensor> {
    check_label(logits, label)?;
    let mut probs = softmax_f64(logits.data());
    probs[label] -= 1.0;
    Tensor::new(
        logits.shape().to_vec(),
        probs.into_iter().map(|p| p as f32).collect(),
    )
}

/// Plain SGD: `w -= lr * grad` for every tensor holding a gradient, then the
/// gradient buffers are zeroed.
pub fn sgd_step(params: &mut [&mut Tensor], learning_rate: f32) {
    assert!(learning_rate > 0.0, "learning rate must be positive");
    for p in params.iter_mut() {
        let Tensor { data, grad, .. } = &mut **p;
        if let Some(g) = grad.as_mut() {
            for (w, gi) in data.iter_mut().zip(g.iter_mut()) {
                *w -= learning_rate * *gi;
                *gi = 0.0;
            }
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn conv_of_ones_sums_windows() {
        let x = t(&[1, 3, 3], &[1.0; 9]);
        let k = t(&[1, 1, 2, 2], &[1.0; 4]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_filter_reproduces_input() {
        let data: Vec<f32> = (0..20).map(|i| i as f32 * 0.37 - 2.0).collect();
        let x = t(&[1, 4, 5], &data);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_inexact_stride() {
        let x = t(&[2, 4, 4], &[0.0; 32]);
        let k = t(&[1, 1, 2, 2], &[0.0; 4]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Shape(_))));
        let k = t(&[1, 2, 3, 3], &[0.0; 18]);
        // (4 - 3) / 2 is not exact
        assert!(matches!(conv2d(&x, &k, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero_b = t(&[2], &[0.0, 0.0]);
        assert_eq!(linear(&x, &eye, &zero_b).unwrap().data(), &[1.0, 2.0]);

        let w = t(&[2, 2], &[1.0, 0.5, 0.0, 0.25]);
        assert_eq!(linear(&x, &w, &zero_b).unwrap().data(), &[2.0, 0.5]);

        let b = t(&[2], &[0.3, -1.5]);
        let zeros = t(&[2], &[0.0, 0.0]);
        assert_eq!(linear(&zeros, &w, &b).unwrap().data(), b.data());

        assert!(linear(&t(&[3], &[0.0; 3]), &w, &b).is_err());
    }

    #[test]
    fn relu_pool_and_cross_entropy() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let pooled = maxpool2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(pooled.shape(), &[1, 1, 1]);
        assert_eq!(pooled.data(), &[4.0]);

        let uniform = t(&[10], &[0.7; 10]);
        let loss = softmax_cross_entropy(&uniform, 3).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&uniform, 10),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = t(&[1, 2, 2], &[5.0, 5.0, 5.0, 5.0]);
        let (_, idx) = maxpool2d_with_indices(&x, 2).unwrap();
        assert_eq!(idx, vec![0]);
        let dx = maxpool2d_backward(x.shape(), &idx, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_through_linear_has_gradient_six() {
        // f(w) = w * w with w feeding both the input and the weight slot
        let w = 3.0f32;
        let x = t(&[1], &[w]);
        let m = t(&[1, 1], &[w]);
        let b = t(&[1], &[0.0]);
        assert_eq!(linear(&x, &m, &b).unwrap().data(), &[9.0]);
        let (dx, dw, _) = linear_backward(&x, &m, &t(&[1], &[1.0])).unwrap();
        assert_eq!(dx.data()[0] + dw.data()[0], 6.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = t(&[1, 3, 3], &[0.5; 9]);
        let k = t(&[2, 1, 2, 2], &[0.25; 8]);
        let (dx, dk) = conv2d_backward(&x, &k, 1, 0, &Tensor::zeros(vec![2, 2, 2])).unwrap();
        assert!(dx.data().iter().chain(dk.data()).all(|&v| v == 0.0));
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (dx, dw, db) = linear_backward(&t(&[2], &[1.0, 1.0]), &w, &Tensor::zeros(vec![2])).unwrap();
        assert!(dx.data().iter().chain(dw.data()).chain(db.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_examples() {
        let mut w = t(&[1], &[1.0]);
        w.grad_mut()[0] = 2.0;
        sgd_step(&mut [&mut w], 0.1);
        assert!((w.data()[0] - 0.8).abs() < 1e-7);
        assert_eq!(w.grad().unwrap(), &[0.0]);

        let mut v = t(&[2], &[0.4, -1.0]);
        v.grad_mut();
        sgd_step(&mut [&mut v], 0.5);
        assert_eq!(v.data(), &[0.4, -1.0]);
    }

    #[test]
    fn two_steps_match_one_summed_step() {
        let start = [0.3f32, -0.7, 1.1];
        let g1 = [0.5f32, -0.25, 2.0];
        let g2 = [-1.0f32, 0.75, 0.125];
        let lr = 0.05;
        let mut a = t(&[3], &start);
        a.grad_mut().copy_from_slice(&g1);
        sgd_step(&mut [&mut a], lr);
        a.grad_mut().copy_from_slice(&g2);
        sgd_step(&mut [&mut a], lr);

        let mut b = t(&[3], &start);
        for (g, (x, y)) in b.grad_mut().iter_mut().zip(g1.iter().zip(&g2)) {
            *g = x + y;
        }
        sgd_step(&mut [&mut b], lr);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
