//! Forward passes and hand-written backward passes for each layer type.
//!
//! Shapes: fully connected layers and vector activations are
//! `[features, batch]`; image activations are `[batch, channels, h, w]`.
//! `Flatten` converts the latter into the former. No layer carries a bias.
//!
//! Weight gradients are derivatives of the (batch-mean) loss, so a
//! `grad_output` that already carries the `1/batch` factor yields the
//! mini-batch expectation `E_x[grad_b(x) a(x)^T]` directly.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{col2im_add, gemm, im2col_into, ConvGeometry, Matrix, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Output of a layer's backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Tensor,
    pub weights: Option<Tensor>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn expect_rank(t: &Tensor, rank: usize, layer: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            layer,
            format!("expected rank {rank} input, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

/// `b = W a` with `W` of shape `out x in`.
#[derive(Debug, Clone)]
pub struct FullyConnected {
    weights: Tensor,
    cache: Option<Tensor>,
}

impl FullyConnected {
    pub fn new(weights: Matrix) -> Self {
        FullyConnected {
            weights: weights.into_tensor(),
            cache: None,
        }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        FullyConnected {
            weights: he_normal(&[out_dim, in_dim], in_dim, rng),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weight_matrix(&self) -> Matrix {
        Matrix::from_tensor(self.weights.clone()).expect("rank 2 by construction")
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        expect_rank(input, 2, "FullyConnected")?;
        let (in_dim, batch) = (input.shape()[0], input.shape()[1]);
        if in_dim != self.in_dim() {
            return Err(Error::dim(
                "FullyConnected",
                format!("input has {in_dim} features, layer expects {}", self.in_dim()),
            ));
        }
        let out = self.out_dim();
        let mut data = vec![0.0; out * batch];
        gemm(out, in_dim, batch, 1.0, self.weights.data(), false, input.data(), false, 0.0, &mut data);
        Ok(Tensor::from_parts(vec![out, batch], data))
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Gradients> {
        let input = self.cache.as_ref().ok_or(Error::MissingCache("FullyConnected"))?;
        let (in_dim, batch) = (input.shape()[0], input.shape()[1]);
        let out = self.out_dim();
        if grad_output.shape() != [out, batch] {
            return Err(Error::dim(
                "FullyConnected::backward",
                format!("grad shape {:?}, expected [{out}, {batch}]", grad_output.shape()),
            ));
        }
        let mut grad_in = vec![0.0; in_dim * batch];
        gemm(in_dim, out, batch, 1.0, self.weights.data(), true, grad_output.data(), false, 0.0, &mut grad_in);
        let mut grad_w = vec![0.0; out * in_dim];
        gemm(out, batch, in_dim, 1.0, grad_output.data(), false, input.data(), true, 0.0, &mut grad_w);
        Ok(Gradients {
            input: Tensor::from_parts(vec![in_dim, batch], grad_in),
            weights: Some(Tensor::from_parts(vec![out, in_dim], grad_w)),
        })
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvCache {
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    cols: Vec<f64>,
}

/// Bias-free 2-D convolution computed as one im2col matrix multiply per sample.
/// Weights have shape `[out_channels, in_channels, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weights: Tensor,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(weights: Tensor, stride: usize, padding: usize) -> Result<Self> {
        expect_rank(&weights, 4, "Conv2d weights")?;
        if stride == 0 {
            return Err(Error::Shape("stride must be >= 1".into()));
        }
        Ok(Conv2d {
            weights,
            stride,
            padding,
            cache: None,
        })
    }

    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let w = he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        Conv2d::new(w, stride, padding)
    }

    pub fn geometry(&self) -> ConvGeometry {
        let s = self.weights.shape();
        ConvGeometry {
            kernel_h: s[2],
            kernel_w: s[3],
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// `W_row`: `n x (m*kh*kw)`, one row per output feature.
    pub fn weight_row(&self) -> Matrix {
        let n = self.out_channels();
        Matrix::from_parts(n, self.weights.len() / n, self.weights.data().to_vec())
    }

    /// `W_col`: `m x (n*kh*kw)`, one row per input feature.
    pub fn weight_col(&self) -> Matrix {
        let s = self.weights.shape();
        let (n, m, k) = (s[0], s[1], s[2] * s[3]);
        Matrix::from_fn(m, n * k, |j, col| {
            let (o, v) = (col / k, col % k);
            self.weights.data()[(o * m + j) * k + v]
        })
    }

    pub fn output_shape(&self, chw: [usize; 3]) -> Result<[usize; 3]> {
        if chw[0] != self.in_channels() {
            return Err(Error::dim(
                "Conv2d",
                format!("input has {} channels, layer expects {}", chw[0], self.in_channels()),
            ));
        }
        let (q1, q2) = self.geometry().output_size(chw[1], chw[2])?;
        Ok([self.out_channels(), q1, q2])
    }

    /// Forward pass; `buffer` is a previous im2col buffer to reuse if it fits.
    fn run(&self, input: &Tensor, buffer: Option<Vec<f64>>) -> Result<(Tensor, ConvCache)> {
        expect_rank(input, 4, "Conv2d")?;
        let s = input.shape();
        let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
        let [n, q1, q2] = self.output_shape([c, h, w])?;
        let g = self.geometry();
        let k = g.patch_len(c);
        let q = q1 * q2;
        // every entry is overwritten by im2col, so a same-sized buffer needs no clearing
        let mut cols = match buffer {
            Some(b) if b.len() == batch * k * q => b,
            _ => vec![0.0; batch * k * q],
        };
        let mut out = vec![0.0; batch * n * q];
        for b in 0..batch {
            let img = &input.data()[b * c * h * w..(b + 1) * c * h * w];
            let col = &mut cols[b * k * q..(b + 1) * k * q];
            im2col_into(img, (c, h, w), &g, (q1, q2), col);
            gemm(n, k, q, 1.0, self.weights.data(), false, col, false, 0.0, &mut out[b * n * q..(b + 1) * n * q]);
        }
        let cache = ConvCache {
            input_shape: [batch, c, h, w],
            out_hw: (q1, q2),
            cols,
        };
        Ok((Tensor::from_parts(vec![batch, n, q1, q2], out), cache))
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Gradients> {
        let (grad_w, grad_in) = self.backward_parts(grad_output, true)?;
        Ok(Gradients {
            input: grad_in.expect("requested"),
            weights: Some(grad_w),
        })
    }

    /// Weight gradient and, when `need_input`, the input gradient.
    fn backward_parts(&self, grad_output: &Tensor, need_input: bool) -> Result<(Tensor, Option<Tensor>)> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache("Conv2d"))?;
        let [batch, c, h, w] = cache.input_shape;
        let (q1, q2) = cache.out_hw;
        let n = self.out_channels();
        if grad_output.shape() != [batch, n, q1, q2] {
            return Err(Error::dim(
                "Conv2d::backward",
                format!("grad shape {:?}, expected {:?}", grad_output.shape(), [batch, n, q1, q2]),
            ));
        }
        let g = self.geometry();
        let k = g.patch_len(c);
        let q = q1 * q2;
        let mut grad_w = vec![0.0; n * k];
        let mut grad_in = if need_input { vec![0.0; batch * c * h * w] } else { Vec::new() };
        let mut grad_cols = if need_input { vec![0.0; k * q] } else { Vec::new() };
        for b in 0..batch {
            let go = &grad_output.data()[b * n * q..(b + 1) * n * q];
            let col = &cache.cols[b * k * q..(b + 1) * k * q];
            gemm(n, q, k, 1.0, go, false, col, true, 1.0, &mut grad_w);
            if need_input {
                gemm(k, n, q, 1.0, self.weights.data(), true, go, false, 0.0, &mut grad_cols);
                col2im_add(&grad_cols, (c, h, w), &g, (q1, q2), &mut grad_in[b * c * h * w..(b + 1) * c * h * w]);
            }
        }
        let grad_w = Tensor::from_parts(self.weights.shape().to_vec(), grad_w);
        Ok((grad_w, need_input.then(|| Tensor::from_parts(vec![batch, c, h, w], grad_in))))
    }
}

// ---------------------------------------------------------------------------

/// Splits an activation into `(outer, channels, inner)` so that element
/// `(o, ch, i)` lives at `(o*channels + ch)*inner + i`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [f, n] => Ok((1, f, n)),
        [n, c, h, w] => Ok((n, c, h * w)),
        ref s => Err(Error::dim("BatchNorm", format!("unsupported shape {s:?}"))),
    }
}

fn batch_size(shape: &[usize]) -> usize {
    match *shape {
        [_, n] => n,
        [n, ..] => n,
        _ => 0,
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    shape: Vec<usize>,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Parameter-free batch normalization (identity affine transform).
///
/// Running statistics for evaluation are updated with momentum 0.1; the
/// running variance uses the unbiased batch estimate.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub eps: f64,
    channels: usize,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            eps: BN_EPS,
            channels,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.channels || var.len() != self.channels {
            return Err(Error::dim("BatchNorm::set_running_stats", "channel count"));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Per-channel mean and (biased) variance of the last training batch.
    pub fn batch_stats(&self) -> (&[f64], &[f64]) {
        (&self.batch_mean, &self.batch_var)
    }

    fn check_channels(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let layout = channel_layout(shape)?;
        if layout.1 != self.channels {
            return Err(Error::dim(
                "BatchNorm",
                format!("input has {} channels, layer expects {}", layout.1, self.channels),
            ));
        }
        Ok(layout)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let (outer, ch, inner) = self.check_channels(input.shape())?;
        let mut out = input.data().to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
                let mean = self.running_mean[c];
                let base = (o * ch + c) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
        }
        Ok(Tensor::from_parts(input.shape().to_vec(), out))
    }

    fn train_forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (outer, ch, inner) = self.check_channels(input.shape())?;
        let batch = batch_size(input.shape());
        if batch < 2 {
            return Err(Error::DegenerateBatch(batch));
        }
        let count = (outer * inner) as f64;
        let data = input.data();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for o in 0..outer {
            for (c, m) in mean.iter_mut().enumerate() {
                let base = (o * ch + c) * inner;
                *m += data[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                var[c] += data[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = data.to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                out[base..base + inner]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
            }
        }
        let unbias = count / (count - 1.0);
        for c in 0..ch {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbias;
        }
        self.batch_mean = mean;
        self.batch_var = var;
        self.cache = Some(BnCache {
            shape: input.shape().to_vec(),
            normalized: out.clone(),
            inv_std,
        });
        Ok(Tensor::from_parts(input.shape().to_vec(), out))
    }

    /// Full batch-norm derivative including the mean and variance paths:
    /// `dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))`.
    fn backward(&mut self, grad_output: &Tensor) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache("BatchNorm"))?;
        if grad_output.shape() != cache.shape.as_slice() {
            return Err(Error::dim("BatchNorm::backward", "gradient shape differs from input"));
        }
        let (outer, ch, inner) = channel_layout(&cache.shape)?;
        let count = (outer * inner) as f64;
        let g = grad_output.data();
        let xhat = &cache.normalized;
        let mut g_mean = vec![0.0; ch];
        let mut gx_mean = vec![0.0; ch];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    g_mean[c] += g[i];
                    gx_mean[c] += g[i] * xhat[i];
                }
            }
        }
        let mut out = vec![0.0; g.len()];
        for o in 0..outer {
            for c in 0..ch {
                let (gm, gxm) = (g_mean[c] / count, gx_mean[c] / count);
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    out[i] = cache.inv_std[c] * (g[i] - gm - xhat[i] * gxm);
                }
            }
        }
        Ok(Gradients {
            input: Tensor::from_parts(cache.shape.clone(), out),
            weights: None,
        })
    }
}

// ---------------------------------------------------------------------------

/// `max(a, 0)`; the derivative is taken as 1 for `a >= 0`.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    fn infer(input: &Tensor) -> Tensor {
        input.map(|v| v.max(0.0))
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Gradients> {
        let mask = self.mask.as_ref().ok_or(Error::MissingCache("ReLU"))?;
        if mask.len() != grad_output.len() {
            return Err(Error::dim("ReLU::backward", "gradient length differs from input"));
        }
        let data = grad_output
            .data()
            .iter()
            .zip(mask)
            .map(|(g, &keep)| if keep { *g } else { 0.0 })
            .collect();
        Ok(Gradients {
            input: Tensor::from_parts(grad_output.shape().to_vec(), data),
            weights: None,
        })
    }
}

// ---------------------------------------------------------------------------

/// Square max pooling with stride equal to the window. Ties go to the first
/// element in row-major order.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    window: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Shape("pool window must be >= 1".into()));
        }
        Ok(MaxPool2d {
            window,
            cache: None,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn output_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::Shape(format!(
                "pool window {} does not divide {h}x{w}",
                self.window
            )));
        }
        Ok([c, h / self.window, w / self.window])
    }

    fn run(&self, input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        expect_rank(input, 4, "MaxPool2d")?;
        let s = input.shape();
        let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
        let [_, oh, ow] = self.output_shape([c, h, w])?;
        let k = self.window;
        let data = input.data();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((Tensor::from_parts(vec![batch, c, oh, ow], out), argmax))
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Gradients> {
        let (shape, argmax) = self.cache.as_ref().ok_or(Error::MissingCache("MaxPool2d"))?;
        if grad_output.len() != argmax.len() {
            return Err(Error::dim("MaxPool2d::backward", "gradient length differs from output"));
        }
        let mut out = vec![0.0; shape.iter().product()];
        for (g, &idx) in grad_output.data().iter().zip(argmax) {
            out[idx] += g;
        }
        Ok(Gradients {
            input: Tensor::from_parts(shape.clone(), out),
            weights: None,
        })
    }

    /// Input index each output element was routed from in the last forward pass.
    pub fn routing(&self) -> Option<&[usize]> {
        self.cache.as_ref().map(|(_, a)| a.as_slice())
    }
}

// ---------------------------------------------------------------------------

/// `[batch, c, h, w]` to `[c*h*w, batch]`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten::default()
    }

    fn infer(input: &Tensor) -> Result<Tensor> {
        match *input.shape() {
            [_, _] => Ok(input.clone()),
            [batch, ..] => {
                let features = input.len() / batch;
                Ok(transpose(input.data(), batch, features))
            }
            _ => Err(Error::dim("Flatten", "rank-1 input")),
        }
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Gradients> {
        let shape = self.cache.as_ref().ok_or(Error::MissingCache("Flatten"))?;
        let input = if shape.len() == 2 {
            grad_output.clone()
        } else {
            let batch = shape[0];
            let features = grad_output.len() / batch;
            transpose(grad_output.data(), features, batch).reshape(shape)?
        };
        Ok(Gradients {
            input,
            weights: None,
        })
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    Tensor::from_parts(vec![cols, rows], out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer {
    FullyConnected(FullyConnected),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu(Relu),
    MaxPool2d(MaxPool2d),
    Flatten(Flatten),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::FullyConnected(_) => "fc",
            Layer::Conv2d(_) => "conv",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu(_) => "relu",
            Layer::MaxPool2d(_) => "maxpool",
            Layer::Flatten(_) => "flatten",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::FullyConnected(_) | Layer::Conv2d(_))
    }

    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            Layer::FullyConnected(l) => Some(&l.weights),
            Layer::Conv2d(l) => Some(&l.weights),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::FullyConnected(l) => Some(&mut l.weights),
            Layer::Conv2d(l) => Some(&mut l.weights),
            _ => None,
        }
    }

    /// Per-sample output shape (`[features]` or `[c, h, w]`) for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let image = |op: &'static str| -> Result<[usize; 3]> {
            match *input {
                [c, h, w] => Ok([c, h, w]),
                _ => Err(Error::dim(op, format!("expected [c, h, w], got {input:?}"))),
            }
        };
        match self {
            Layer::FullyConnected(l) => match *input {
                [f] if f == l.in_dim() => Ok(vec![l.out_dim()]),
                _ => Err(Error::dim(
                    "FullyConnected",
                    format!("expected [{}], got {input:?}", l.in_dim()),
                )),
            },
            Layer::Conv2d(l) => Ok(l.output_shape(image("Conv2d")?)?.to_vec()),
            Layer::MaxPool2d(l) => Ok(l.output_shape(image("MaxPool2d")?)?.to_vec()),
            Layer::BatchNorm(l) => {
                if input.first() != Some(&l.channels) {
                    return Err(Error::dim(
                        "BatchNorm",
                        format!("expected {} channels, got {input:?}", l.channels),
                    ));
                }
                Ok(input.to_vec())
            }
            Layer::Relu(_) => Ok(input.to_vec()),
            Layer::Flatten(_) => Ok(vec![input.iter().product()]),
        }
    }

    /// Forward pass. In training mode the layer caches what `backward` needs;
    /// in evaluation mode it is side-effect free.
    pub fn forward(&mut self, input: &Tensor, training: bool) -> Result<Tensor> {
        if !training {
            return self.infer(input);
        }
        match self {
            Layer::FullyConnected(l) => {
                let out = l.infer(input)?;
                l.cache = Some(input.clone());
                Ok(out)
            }
            Layer::Conv2d(l) => {
                let reuse = l.cache.take().map(|c| c.cols);
                let (out, cache) = l.run(input, reuse)?;
                l.cache = Some(cache);
                Ok(out)
            }
            Layer::BatchNorm(l) => l.train_forward(input),
            Layer::Relu(l) => {
                l.mask = Some(input.data().iter().map(|v| *v >= 0.0).collect());
                Ok(Relu::infer(input))
            }
            Layer::MaxPool2d(l) => {
                let (out, argmax) = l.run(input)?;
                l.cache = Some((input.shape().to_vec(), argmax));
                Ok(out)
            }
            Layer::Flatten(l) => {
                let out = Flatten::infer(input)?;
                l.cache = Some(input.shape().to_vec());
                Ok(out)
            }
        }
    }

    /// Evaluation-mode forward pass (batch norm uses running statistics).
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::FullyConnected(l) => l.infer(input),
            Layer::Conv2d(l) => l.run(input, None).map(|(t, _)| t),
            Layer::BatchNorm(l) => l.infer(input),
            Layer::Relu(_) => Ok(Relu::infer(input)),
            Layer::MaxPool2d(l) => l.run(input).map(|(t, _)| t),
            Layer::Flatten(_) => Flatten::infer(input),
        }
    }

    /// Only the weight gradient, skipping the input gradient where that saves work.
    /// `None` for layers without weights.
    pub fn weight_gradient(&mut self, grad_output: &Tensor) -> Result<Option<Tensor>> {
        match self {
            Layer::Conv2d(l) => l.backward_parts(grad_output, false).map(|(w, _)| Some(w)),
            Layer::FullyConnected(l) => l.backward(grad_output).map(|g| g.weights),
            _ => Ok(None),
        }
    }

    pub fn backward(&mut self, grad_output: &Tensor) -> Result<Gradients> {
        match self {
            Layer::FullyConnected(l) => l.backward(grad_output),
            Layer::Conv2d(l) => l.backward(grad_output),
            Layer::BatchNorm(l) => l.backward(grad_output),
            Layer::Relu(l) => l.backward(grad_output),
            Layer::MaxPool2d(l) => l.backward(grad_output),
            Layer::Flatten(l) => l.backward(grad_output),
        }
    }
}

// ---------------------------------------------------------------------------

/// Softmax followed by mean cross-entropy over the batch.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxCrossEntropy {
    cache: Option<(Tensor, Vec<usize>)>,
}

impl SoftmaxCrossEntropy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mean loss for `logits` of shape `[classes, batch]`.
    pub fn forward(&mut self, logits: &Tensor, labels: &[usize]) -> Result<f64> {
        let (probs, loss) = softmax_loss(logits, labels)?;
        self.cache = Some((probs, labels.to_vec()));
        Ok(loss)
    }

    /// `(softmax - onehot) / batch`.
    pub fn backward(&self) -> Result<Tensor> {
        let (probs, labels) = self.cache.as_ref().ok_or(Error::MissingCache("SoftmaxCrossEntropy"))?;
        let batch = labels.len();
        let mut grad = probs.clone();
        for (n, &y) in labels.iter().enumerate() {
            grad.data_mut()[y * batch + n] -= 1.0;
        }
        grad.scale_in_place(1.0 / batch as f64);
        Ok(grad)
    }

    pub fn probabilities(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|(p, _)| p)
    }
}

/// Column-wise softmax and mean cross-entropy.
pub(crate) fn softmax_loss(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, f64)> {
    expect_rank(logits, 2, "SoftmaxCrossEntropy")?;
    let (classes, batch) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::dim(
            "SoftmaxCrossEntropy",
            format!("{} labels for batch {batch}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let z = logits.data();
    let mut probs = vec![0.0; z.len()];
    let mut loss = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let max = (0..classes).map(|c| z[c * batch + n]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..classes {
            let e = (z[c * batch + n] - max).exp();
            probs[c * batch + n] = e;
            total += e;
        }
        for c in 0..classes {
            probs[c * batch + n] /= total;
        }
        loss += total.ln() + max - z[y * batch + n];
    }
    Ok((Tensor::from_parts(vec![classes, batch], probs), loss / batch as f64))
}

/// Loss and its gradient with respect to the logits in one call.
pub fn loss_forward_backward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut head = SoftmaxCrossEntropy::new();
    let loss = head.forward(logits, labels)?;
    Ok((loss, head.backward()?))
}
