//! Back-matching propagation.
//!
//! Two halves live here:
//!
//! * the **exact** least-squares back-matching solutions for fully connected
//!   and convolutional layers, used as an oracle: the weight change that best
//!   reproduces the output signal over the batch, and the per-neuron input
//!   change that best reproduces it given the current weights;
//! * the **approximate** factor engine. Assuming batch-normalized inputs
//!   (`E[a a^T] ~ I`) and row-homogeneous weights, each layer's input ratio
//!   `r = grad_a / grad'_a` collapses to a scalar built from mean squared row
//!   norms. Walking from the output down with `m = 1`, every parametric
//!   layer's gradient is divided by `m * s` (with `s` the weight-sharing
//!   factor) and `m` is then multiplied by that layer's `r`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Layer};
use crate::network::{BackwardBundle, Network, ParamGrad};
use crate::tensor::{col2im_add, gemm, im2col_into, solve_least_squares, Matrix, Tensor};

/// Largest `in_channels * kh * kw` the convolutional oracle will solve for.
pub const ORACLE_MAX_UNKNOWNS: usize = 512;

/// `(1/rows) * sum_i w_i^T w_i`, the mean squared row norm.
pub fn row_mean_sq_norm(w: &Matrix) -> f64 {
    let total: f64 = (0..w.rows())
        .map(|i| w.row(i).iter().map(|v| v * v).sum::<f64>())
        .sum();
    total / w.rows() as f64
}

/// Running backward factor `m` of the approximate walk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorState {
    m: f64,
}

impl Default for FactorState {
    fn default() -> Self {
        FactorState { m: 1.0 }
    }
}

impl FactorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.m = 1.0;
    }

    pub fn value(&self) -> f64 {
        self.m
    }

    /// `m <- m * ratio`, refusing to leave the positive reals.
    pub fn absorb(&mut self, layer: usize, ratio: f64) -> Result<()> {
        if !(ratio > 0.0) || !ratio.is_finite() {
            return Err(Error::CorruptedFactor { layer, value: ratio });
        }
        let next = self.m * ratio;
        if !(next > 0.0) || !next.is_finite() {
            return Err(Error::CorruptedFactor { layer, value: next });
        }
        self.m = next;
        Ok(())
    }
}

/// Sharing factor `s` and input ratio `r` of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactorInfo {
    pub sharing: f64,
    pub ratio: f64,
    /// Named intermediate quantities (norms, pooling factor) for reporting.
    pub norms: BTreeMap<String, f64>,
}

impl LayerFactorInfo {
    fn neutral() -> Self {
        LayerFactorInfo {
            sharing: 1.0,
            ratio: 1.0,
            norms: BTreeMap::new(),
        }
    }
}

/// Least-squares back-matching solutions for one layer and batch.
#[derive(Debug, Clone)]
pub struct ExactBackmatchResult {
    pub delta_prime_w: Tensor,
    pub delta_prime_a: Tensor,
    /// `sum_x ||db(x) - dW' a(x)||^2`.
    pub weight_residual: f64,
    /// Sum over input neurons and samples of the per-neuron matching residual.
    pub input_residual: f64,
}

fn check_ridge(ridge: f64) -> Result<()> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    Ok(())
}

/// Exact back-matching through `b = W a`.
///
/// `w` is `out x in`, `a` is `in x batch` and `delta_b` is `out x batch`
/// (one guiding signal per sample). The weight solution is
/// `(E[a a^T] + ridge I)^-1 E[a db^T]`, transposed; the input solution is
/// `w_j^T db(x) / w_j^T w_j` for every column `w_j` of `W`.
pub fn exact_backmatch_fc(
    w: &Matrix,
    a: &Matrix,
    delta_b: &Matrix,
    ridge: f64,
) -> Result<ExactBackmatchResult> {
    check_ridge(ridge)?;
    let (out, inp) = (w.rows(), w.cols());
    let batch = a.cols();
    if a.rows() != inp || delta_b.rows() != out || delta_b.cols() != batch {
        return Err(Error::dim(
            "exact_backmatch_fc",
            format!(
                "W {out}x{inp}, a {}x{}, db {}x{}",
                a.rows(),
                a.cols(),
                delta_b.rows(),
                delta_b.cols()
            ),
        ));
    }

    // weight problem, scaled so the normal matrix is E[a a^T] + ridge I
    let root = (batch as f64).sqrt();
    let design = Matrix::from_fn(batch, inp, |x, j| a.get(j, x) / root);
    let target = Matrix::from_fn(batch, out, |x, k| delta_b.get(k, x) / root);
    let solution = solve_least_squares(&design, &target, ridge)?;
    let delta_prime_w = solution.transpose();

    let mut pred = vec![0.0; out * batch];
    gemm(out, inp, batch, 1.0, delta_prime_w.data(), false, a.data(), false, 0.0, &mut pred);
    let weight_residual = pred
        .iter()
        .zip(delta_b.data())
        .map(|(p, t)| (t - p).powi(2))
        .sum();

    // input problems: one scalar least squares per (neuron, sample)
    let mut numer = vec![0.0; inp * batch];
    gemm(inp, out, batch, 1.0, w.data(), true, delta_b.data(), false, 0.0, &mut numer);
    let mut delta_prime_a = vec![0.0; inp * batch];
    let mut input_residual = 0.0;
    let signal_sq: Vec<f64> = (0..batch)
        .map(|x| (0..out).map(|k| delta_b.get(k, x).powi(2)).sum())
        .collect();
    for j in 0..inp {
        let gram: f64 = (0..out).map(|k| w.get(k, j).powi(2)).sum();
        if gram == 0.0 {
            return Err(Error::ZeroInteraction { neuron: j });
        }
        for x in 0..batch {
            let num = numer[j * batch + x];
            delta_prime_a[j * batch + x] = num / gram;
            input_residual += signal_sq[x] - num * num / gram;
        }
    }

    Ok(ExactBackmatchResult {
        delta_prime_w: delta_prime_w.into_tensor(),
        delta_prime_a: Tensor::new(vec![inp, batch], delta_prime_a)?,
        weight_residual,
        input_residual,
    })
}

/// Exact back-matching through a convolution, via its im2col form
/// `b_col = W_row a_i2c`.
///
/// `a` is `[batch, m, h, w]`, `delta_b` is `[batch, n, q1, q2]`. The weight
/// solution is `(E_x[a_i2c a_i2c^T] + ridge I)^-1 E_x[a_i2c db_col^T]`
/// (locations summed, samples averaged). The input solution divides the
/// regular backpropagated value at each input location by the squared norm
/// of all weight components that touch that location.
pub fn exact_backmatch_conv(
    layer: &Conv2d,
    a: &Tensor,
    delta_b: &Tensor,
    ridge: f64,
) -> Result<ExactBackmatchResult> {
    check_ridge(ridge)?;
    let g = layer.geometry();
    let [batch, m, h, wd] = match *a.shape() {
        [b, m, h, w] => [b, m, h, w],
        ref s => return Err(Error::dim("exact_backmatch_conv", format!("input {s:?}"))),
    };
    let [n, q1, q2] = layer.output_shape([m, h, wd])?;
    if delta_b.shape() != [batch, n, q1, q2] {
        return Err(Error::dim(
            "exact_backmatch_conv",
            format!("signal {:?}, expected {:?}", delta_b.shape(), [batch, n, q1, q2]),
        ));
    }
    let k = g.patch_len(m);
    if k > ORACLE_MAX_UNKNOWNS {
        return Err(Error::TooLarge {
            unknowns: k,
            limit: ORACLE_MAX_UNKNOWNS,
        });
    }
    let q = q1 * q2;
    let img = m * h * wd;
    let w_row = layer.weights().data();

    let mut cols = vec![0.0; batch * k * q];
    for x in 0..batch {
        im2col_into(
            &a.data()[x * img..(x + 1) * img],
            (m, h, wd),
            &g,
            (q1, q2),
            &mut cols[x * k * q..(x + 1) * k * q],
        );
    }

    // weight problem over all (sample, location) rows
    let root = (batch as f64).sqrt();
    let rows = batch * q;
    let design = Matrix::from_fn(rows, k, |r, p| {
        let (x, u) = (r / q, r % q);
        cols[x * k * q + p * q + u] / root
    });
    let target = Matrix::from_fn(rows, n, |r, o| {
        let (x, u) = (r / q, r % q);
        delta_b.data()[(x * n + o) * q + u] / root
    });
    let solution = solve_least_squares(&design, &target, ridge)?;
    let dw_row = solution.transpose();

    let mut weight_residual = 0.0;
    let mut pred = vec![0.0; n * q];
    for x in 0..batch {
        gemm(n, k, q, 1.0, dw_row.data(), false, &cols[x * k * q..(x + 1) * k * q], false, 0.0, &mut pred);
        let target = &delta_b.data()[x * n * q..(x + 1) * n * q];
        weight_residual += pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum::<f64>();
    }

    // interaction norms per input location: col2im of per-patch-row sum_k w^2
    let mut w_sq_cols = vec![0.0; k * q];
    for p in 0..k {
        let s: f64 = (0..n).map(|o| w_row[o * k + p].powi(2)).sum();
        w_sq_cols[p * q..(p + 1) * q].fill(s);
    }
    let mut gram = vec![0.0; img];
    col2im_add(&w_sq_cols, (m, h, wd), &g, (q1, q2), &mut gram);
    if let Some(neuron) = gram.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroInteraction { neuron });
    }

    let mut delta_prime_a = vec![0.0; batch * img];
    let mut input_residual = 0.0;
    let mut grad_cols = vec![0.0; k * q];
    for x in 0..batch {
        let db = &delta_b.data()[x * n * q..(x + 1) * n * q];
        gemm(k, n, q, 1.0, w_row, true, db, false, 0.0, &mut grad_cols);
        let mut numer = vec![0.0; img];
        col2im_add(&grad_cols, (m, h, wd), &g, (q1, q2), &mut numer);
        let signal = interaction_signal_sq(db, n, (m, h, wd), &g, (q1, q2));
        for (i, ((num, den), sig)) in numer.iter().zip(&gram).zip(&signal).enumerate() {
            delta_prime_a[x * img + i] = num / den;
            input_residual += sig - num * num / den;
        }
    }

    Ok(ExactBackmatchResult {
        delta_prime_w: Tensor::new(layer.weights().shape().to_vec(), dw_row.data().to_vec())?,
        delta_prime_a: Tensor::new(vec![batch, m, h, wd], delta_prime_a)?,
        weight_residual,
        input_residual,
    })
}

/// `||db[j u]||^2` for every input location: the squared norm of the output
/// signal entries paired with the weights that touch `(j, u)`. Every output
/// feature is paired once per kernel tap covering the location.
fn interaction_signal_sq(
    db: &[f64],
    n: usize,
    (m, h, w): (usize, usize, usize),
    g: &crate::tensor::ConvGeometry,
    (q1, q2): (usize, usize),
) -> Vec<f64> {
    let q = q1 * q2;
    let k = g.patch_len(m);
    let mut cols = vec![0.0; k * q];
    for u in 0..q {
        let s: f64 = (0..n).map(|o| db[o * q + u].powi(2)).sum();
        for p in 0..k {
            cols[p * q + u] = s;
        }
    }
    let mut out = vec![0.0; m * h * w];
    col2im_add(&cols, (m, h, w), g, (q1, q2), &mut out);
    out
}

// ---------------------------------------------------------------------------

fn frobenius_sq(t: &Tensor) -> f64 {
    t.sum_sq()
}

/// Mean squared row norm of a parametric layer in its row form
/// (`W` for FC, `W_row` for conv): `||W||_F^2 / out_features`.
fn row_form_norm(layer: &Layer) -> Option<f64> {
    match layer {
        Layer::FullyConnected(l) => Some(frobenius_sq(l.weights()) / l.out_dim() as f64),
        Layer::Conv2d(l) => Some(frobenius_sq(l.weights()) / l.out_channels() as f64),
        _ => None,
    }
}

/// Pool window of the first max-pool after layer `index`, looking only
/// through batch-norm and ReLU layers.
fn following_pool_area(network: &Network, index: usize) -> usize {
    for layer in &network.layers()[index + 1..] {
        match layer {
            Layer::BatchNorm(_) | Layer::Relu(_) => continue,
            Layer::MaxPool2d(p) => return p.window() * p.window(),
            _ => break,
        }
    }
    1
}

/// Sharing factor `s` and input ratio `r = grad_a / grad'_a` of layer `index`.
///
/// * FC: `r = ||W^T||^2_{2,mu}`, `s = 1`.
/// * Conv: `s = q1*q2 / pool_area` and `r = ||W_col||^2_{2,mu} / c` with
///   `c = (h*w) / (q1*q2 / pool_area)`, where `pool_area` is the window area
///   of a max-pool directly following the conv block (1 if none).
/// * BN: `r = 1 / ||W_below||^2_{2,mu}` using the row form of the nearest
///   parametric layer below it (1 if there is none).
/// * ReLU, max-pool, flatten: neutral.
pub fn layer_ratio(network: &Network, index: usize) -> Result<LayerFactorInfo> {
    let layer = network
        .layers()
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {index}")))?;
    let degenerate = |v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::DegenerateWeight { layer: index })
        }
    };
    let mut info = LayerFactorInfo::neutral();
    match layer {
        Layer::FullyConnected(l) => {
            let norm = degenerate(frobenius_sq(l.weights()) / l.in_dim() as f64)?;
            info.norms.insert("w_t".into(), norm);
            info.ratio = norm;
        }
        Layer::Conv2d(l) => {
            let input = network.shape_before(index);
            let output = network.shape_before(index + 1);
            let in_positions = (input[1] * input[2]) as f64;
            let out_positions = (output[1] * output[2]) as f64;
            let pool = following_pool_area(network, index) as f64;
            let pooled = out_positions / pool;
            let c = in_positions / pooled;
            let col_norm = degenerate(frobenius_sq(l.weights()) / l.in_channels() as f64)?;
            info.sharing = pooled;
            info.ratio = col_norm / c;
            info.norms.insert("w_col".into(), col_norm);
            info.norms.insert("w_row".into(), frobenius_sq(l.weights()) / l.out_channels() as f64);
            info.norms.insert("c".into(), c);
            info.norms.insert("pool_area".into(), pool);
        }
        Layer::BatchNorm(_) => {
            let below = network.layers()[..index]
                .iter()
                .enumerate()
                .rev()
                .find_map(|(j, l)| row_form_norm(l).map(|n| (j, n)));
            if let Some((j, norm)) = below {
                let norm = if norm > 0.0 && norm.is_finite() {
                    norm
                } else {
                    return Err(Error::DegenerateWeight { layer: j });
                };
                info.norms.insert("w_below_row".into(), norm);
                info.ratio = 1.0 / norm;
            }
        }
        Layer::Relu(_) | Layer::MaxPool2d(_) | Layer::Flatten(_) => {}
    }
    Ok(info)
}

/// One layer's entry in the output-to-input factor walk.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStep {
    pub layer: usize,
    pub kind: &'static str,
    pub sharing: f64,
    pub ratio: f64,
    /// Backward factor on the layer's output (before its own ratio).
    pub m_output: f64,
    /// Backward factor on the layer's input (after its own ratio).
    pub m_input: f64,
    /// `1 / (m_output * s)` for parametric layers.
    pub scale: Option<f64>,
    pub norms: BTreeMap<String, f64>,
}

/// Walks from the output layer to the input accumulating `m`, starting from 1.
/// Steps are returned in walk order (top layer first).
pub fn factor_walk(network: &Network) -> Result<Vec<FactorStep>> {
    let mut state = FactorState::new();
    let mut steps = Vec::with_capacity(network.layers().len());
    for (i, layer) in network.layers().iter().enumerate().rev() {
        let info = layer_ratio(network, i)?;
        let m_output = state.value();
        let scale = layer.is_parametric().then(|| 1.0 / (m_output * info.sharing));
        state.absorb(i, info.ratio)?;
        steps.push(FactorStep {
            layer: i,
            kind: layer.kind(),
            sharing: info.sharing,
            ratio: info.ratio,
            m_output,
            m_input: state.value(),
            scale,
            norms: info.norms,
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone)]
pub struct ScaledGradients {
    pub grads: Vec<ParamGrad>,
    pub trace: Vec<FactorStep>,
}

/// Replaces every parametric layer's gradient by `grad / (m * s)`.
pub fn apply_backmatch_scaling(network: &Network, bundle: &BackwardBundle) -> Result<ScaledGradients> {
    let trace = factor_walk(network)?;
    let grads = bundle
        .grads
        .iter()
        .map(|pg| {
            let scale = trace
                .iter()
                .find(|s| s.layer == pg.layer)
                .and_then(|s| s.scale)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("gradient for non-parametric layer {}", pg.layer))
                })?;
            Ok(ParamGrad {
                layer: pg.layer,
                grad: pg.grad.scale(scale),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScaledGradients { grads, trace })
}

/// Closed-form scale of each parametric layer of a BN-LeNet on 3x32x32
/// input (`s_cv1 = 196`, `s_cv2 = 25`), written out layer by layer in terms
/// of the weight norms. Returned bottom-up as `(layer index, scale)`.
pub fn lenet_closed_form(network: &Network) -> Result<Vec<(usize, f64)>> {
    const PATTERN: [&str; 16] = [
        "conv", "bn", "relu", "maxpool", "conv", "bn", "relu", "maxpool", "flatten", "fc", "bn",
        "relu", "fc", "bn", "relu", "fc",
    ];
    let kinds: Vec<&str> = network.layers().iter().map(Layer::kind).collect();
    if kinds != PATTERN || network.input_shape() != [3, 32, 32] {
        return Err(Error::InvalidArgument(
            "closed form applies to the BN-LeNet layout on 3x32x32 input".into(),
        ));
    }
    let layers = network.layers();
    let fc = |i: usize| match &layers[i] {
        Layer::FullyConnected(l) => l.weight_matrix(),
        _ => unreachable!("pattern checked"),
    };
    let conv = |i: usize| match &layers[i] {
        Layer::Conv2d(l) => (l.weight_row(), l.weight_col()),
        _ => unreachable!("pattern checked"),
    };
    let (cv1_row, _) = conv(0);
    let (cv2_row, cv2_col) = conv(4);
    let (fc1, fc2, fc3) = (fc(9), fc(12), fc(15));
    let n = row_mean_sq_norm;
    let fc3_t = n(&fc3.transpose());
    let fc2_r = n(&fc2);
    let fc2_t = n(&fc2.transpose());
    let fc1_r = n(&fc1);
    let fc1_t = n(&fc1.transpose());
    let cv2_r = n(&cv2_row);
    let cv2_c = n(&cv2_col);
    let cv1_r = n(&cv1_row);

    let s_fc3 = 1.0;
    let s_fc2 = fc2_r / fc3_t;
    let s_fc1 = (fc2_r * fc1_r) / (fc3_t * fc2_t);
    let s_cv2 = (fc2_r * fc1_r * cv2_r) / (25.0 * (fc3_t * fc2_t * fc1_t));
    let s_cv1 = (fc2_r * fc1_r * cv2_r * cv1_r) / (25.0 * (fc3_t * fc2_t * fc1_t * cv2_c));
    Ok(vec![(0, s_cv1), (4, s_cv2), (9, s_fc1), (12, s_fc2), (15, s_fc3)])
}

/// A `dim x batch` matrix whose rows are orthogonal with squared norm
/// `batch`, so that `E[a a^T]` over its columns is the identity.
pub fn whitened_batch(dim: usize, batch: usize, rng: &mut impl Rng) -> Result<Matrix> {
    if batch < dim {
        return Err(Error::InvalidArgument(format!(
            "cannot whiten {dim} features with only {batch} samples"
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..batch).map(|_| StandardNormal.sample(rng)).collect();
        // two Gram-Schmidt passes for orthogonality to machine precision
        for _ in 0..2 {
            for r in &rows {
                let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    let root = (batch as f64).sqrt();
    Matrix::new(dim, batch, rows.concat().into_iter().map(|v| v * root).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::FullyConnected;
    use crate::network::{ArchSpec, LayerSpec, Preset};
    use crate::tensor::{matmul, mean_outer, ConvGeometry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Gradient descent on `||db - X a||_F^2` until the gradient vanishes.
    /// Independent of the normal-equation path.
    fn brute_force_weight_fit(a: &Matrix, db: &Matrix) -> (Matrix, f64) {
        let (out, inp) = (db.rows(), a.rows());
        let residual = |x: &Matrix| {
            let p = matmul(x, a).unwrap();
            p.as_tensor().sub(db.as_tensor()).unwrap().sum_sq()
        };
        // largest eigenvalue of a a^T by power iteration sets the step
        let aat = matmul(a, &a.transpose()).unwrap();
        let mut v = Matrix::from_fn(inp, 1, |_, _| 1.0);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = matmul(&aat, &v).unwrap();
            lambda = w.as_tensor().norm() / v.as_tensor().norm();
            v = Matrix::from_tensor(w.as_tensor().scale(1.0 / w.as_tensor().norm())).unwrap();
        }
        let step = 1.0 / (2.0 * lambda);
        let mut x = Matrix::zeros(out, inp);
        for _ in 0..2_000_000 {
            let r = matmul(&x, a).unwrap().as_tensor().sub(db.as_tensor()).unwrap();
            let grad = matmul(&Matrix::from_tensor(r).unwrap(), &a.transpose()).unwrap();
            if grad.as_tensor().norm() < 1e-13 {
                break;
            }
            x = Matrix::from_tensor(x.as_tensor().sub(&grad.as_tensor().scale(2.0 * step)).unwrap())
                .unwrap();
        }
        let res = residual(&x);
        (x, res)
    }

    #[test]
    fn row_norm_cases() {
        assert_eq!(row_mean_sq_norm(&Matrix::identity(7)), 1.0);
        assert_eq!(row_mean_sq_norm(&Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap()), 25.0);
        assert_eq!(row_mean_sq_norm(&Matrix::zeros(2, 3)), 0.0);
    }

    #[test]
    fn output_layer_factor_512_over_10() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = random_matrix(&mut rng, 10, 512);
        for i in 0..10 {
            let norm = w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..512 {
                let v = w.get(i, j) / norm;
                w.set(i, j, v);
            }
        }
        let factor = 1.0 / row_mean_sq_norm(&w.transpose());
        assert!((factor - 51.2).abs() / 51.2 < 1e-12);
    }

    #[test]
    fn whitened_fc_matches_bp_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = whitened_batch(5, 16, &mut rng).unwrap();
        assert!(mean_outer(&a).as_tensor().max_abs_diff(Matrix::identity(5).as_tensor()).unwrap() < 1e-13);
        let w = random_matrix(&mut rng, 3, 5);
        let db = random_matrix(&mut rng, 3, 16);
        let res = exact_backmatch_fc(&w, &a, &db, 0.0).unwrap();
        let bp = matmul(&db, &a.transpose()).unwrap().as_tensor().scale(1.0 / 16.0);
        assert!(res.delta_prime_w.max_abs_diff(&bp).unwrap() < 1e-8);
    }

    #[test]
    fn unit_columns_give_bp_input_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = random_matrix(&mut rng, 4, 3);
        for j in 0..3 {
            let norm = (0..4).map(|k| w.get(k, j).powi(2)).sum::<f64>().sqrt();
            for k in 0..4 {
                let v = w.get(k, j) / norm;
                w.set(k, j, v);
            }
        }
        let a = random_matrix(&mut rng, 3, 6);
        let db = random_matrix(&mut rng, 4, 6);
        let res = exact_backmatch_fc(&w, &a, &db, 0.0).unwrap();
        let bp = matmul(&w.transpose(), &db).unwrap();
        assert!(res.delta_prime_a.max_abs_diff(bp.as_tensor()).unwrap() < 1e-14);
    }

    #[test]
    fn fc_weight_solution_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_matrix(&mut rng, 3, 4);
        let a = random_matrix(&mut rng, 4, 8);
        let db = random_matrix(&mut rng, 3, 8);
        let res = exact_backmatch_fc(&w, &a, &db, 0.0).unwrap();
        let (x, brute_res) = brute_force_weight_fit(&a, &db);
        assert!((res.weight_residual - brute_res).abs() < 1e-6);
        assert!(res.delta_prime_w.max_abs_diff(x.as_tensor()).unwrap() < 1e-6);
    }

    #[test]
    fn fc_zero_column_named() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let db = Matrix::zeros(2, 2);
        assert!(matches!(
            exact_backmatch_fc(&w, &a, &db, 0.0),
            Err(Error::ZeroInteraction { neuron: 1 })
        ));
    }

    #[test]
    fn fc_singular_covariance() {
        let w = Matrix::identity(2);
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        let db = Matrix::zeros(2, 3);
        assert!(matches!(exact_backmatch_fc(&w, &a, &db, 0.0), Err(Error::Singular { .. })));
        assert!(exact_backmatch_fc(&w, &a, &db, 1e-3).is_ok());
    }

    #[test]
    fn fc_relation_to_bp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random_matrix(&mut rng, 5, 4);
        let a = random_matrix(&mut rng, 4, 9);
        let db = random_matrix(&mut rng, 5, 9);
        for ridge in [0.0, 0.3] {
            let res = exact_backmatch_fc(&w, &a, &db, ridge).unwrap();
            // covariance-inverse scaling of the BP weight gradient
            let bp_w = matmul(&db, &a.transpose()).unwrap().as_tensor().scale(1.0 / 9.0);
            let mut cov = mean_outer(&a);
            for i in 0..4 {
                let v = cov.get(i, i) + ridge;
                cov.set(i, i, v);
            }
            let bp_w_t = Matrix::from_tensor(bp_w).unwrap().transpose();
            let expected = crate::tensor::solve_linear(&cov, &bp_w_t).unwrap().transpose();
            assert!(res.delta_prime_w.max_abs_diff(expected.as_tensor()).unwrap() < 1e-10);
        }
        // Gram-diagonal scaling of the BP input gradient
        let res = exact_backmatch_fc(&w, &a, &db, 0.0).unwrap();
        let bp_a = matmul(&w.transpose(), &db).unwrap();
        for j in 0..4 {
            let gram: f64 = (0..5).map(|k| w.get(k, j).powi(2)).sum();
            for x in 0..9 {
                assert_eq!(res.delta_prime_a.data()[j * 9 + x], bp_a.get(j, x) / gram);
            }
        }
    }

    fn conv_with(weights: Tensor) -> Conv2d {
        Conv2d::new(weights, 1, 0).unwrap()
    }

    #[test]
    fn pointwise_conv_reduces_to_fc() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (n, m, hw, batch) = (3, 2, 4, 3);
        let w = random_matrix(&mut rng, n, m);
        let conv = conv_with(w.as_tensor().clone().reshape(&[n, m, 1, 1]).unwrap());
        let a = Tensor::from_fn(&[batch, m, 2, 2], |_| rng.random_range(-1.0..1.0));
        let db = Tensor::from_fn(&[batch, n, 2, 2], |_| rng.random_range(-1.0..1.0));
        let conv_res = exact_backmatch_conv(&conv, &a, &db, 0.0).unwrap();

        // reshape to FC: each (sample, location) is one column
        let a_fc = Matrix::from_fn(m, batch * hw, |j, c| a.data()[((c / hw) * m + j) * hw + c % hw]);
        let db_fc = Matrix::from_fn(n, batch * hw, |k, c| db.data()[((c / hw) * n + k) * hw + c % hw]);
        let fc_res = exact_backmatch_fc(&w, &a_fc, &db_fc, 0.0).unwrap();
        assert!(conv_res.delta_prime_w.max_abs_diff(&fc_res.delta_prime_w.clone().reshape(&[n, m, 1, 1]).unwrap()).unwrap() < 1e-12);
        for x in 0..batch {
            for j in 0..m {
                for u in 0..hw {
                    let c = conv_res.delta_prime_a.data()[(x * m + j) * hw + u];
                    let f = fc_res.delta_prime_a.data()[j * batch * hw + x * hw + u];
                    assert!((c - f).abs() < 1e-12);
                }
            }
        }
        assert!((conv_res.weight_residual - fc_res.weight_residual).abs() < 1e-10);
        assert!((conv_res.input_residual - fc_res.input_residual).abs() < 1e-10);
    }

    #[test]
    fn whitened_pointwise_conv_matches_bp() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (n, m, batch) = (2, 3, 2);
        // E_x sum_u a a^T = I: orthonormal rows over (sample, location) scaled by sqrt(batch)
        let flat = whitened_batch(m, batch * 9, &mut rng).unwrap();
        let flat = flat.as_tensor().scale(1.0 / 3.0);
        let a = Tensor::from_fn(&[batch, m, 3, 3], |i| {
            let (x, j, u) = (i / (m * 9), (i / 9) % m, i % 9);
            flat.data()[j * batch * 9 + x * 9 + u]
        });
        let conv = conv_with(Tensor::from_fn(&[n, m, 1, 1], |_| rng.random_range(-1.0..1.0)));
        let db = Tensor::from_fn(&[batch, n, 3, 3], |_| rng.random_range(-1.0..1.0));
        let res = exact_backmatch_conv(&conv, &a, &db, 0.0).unwrap();
        // BP dW_row = E_x db_col a_i2c^T
        let mut bp = vec![0.0; n * m];
        for x in 0..batch {
            for k in 0..n {
                for j in 0..m {
                    for u in 0..9 {
                        bp[k * m + j] += db.data()[(x * n + k) * 9 + u] * a.data()[(x * m + j) * 9 + u]
                            / batch as f64;
                    }
                }
            }
        }
        for (p, b) in res.delta_prime_w.data().iter().zip(&bp) {
            assert!((p - b).abs() < 1e-8);
        }
    }

    /// Direct (loop) convolution, independent of im2col.
    fn direct_conv(w: &[f64], a: &[f64], n: usize, m: usize, kh: usize, kw: usize, h: usize, wd: usize) -> Vec<f64> {
        let (q1, q2) = (h - kh + 1, wd - kw + 1);
        let mut out = vec![0.0; n * q1 * q2];
        for k in 0..n {
            for y in 0..q1 {
                for x in 0..q2 {
                    let mut s = 0.0;
                    for j in 0..m {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                s += w[((k * m + j) * kh + dy) * kw + dx] * a[(j * h + y + dy) * wd + x + dx];
                            }
                        }
                    }
                    out[(k * q1 + y) * q2 + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_weight_solution_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let batch = 4;
        let conv = conv_with(Tensor::from_fn(&[1, 1, 2, 2], |_| rng.random_range(-1.0..1.0)));
        let a = Tensor::from_fn(&[batch, 1, 3, 3], |_| rng.random_range(-1.0..1.0));
        let db = Tensor::from_fn(&[batch, 1, 2, 2], |_| rng.random_range(-1.0..1.0));
        let res = exact_backmatch_conv(&conv, &a, &db, 0.0).unwrap();

        let objective = |w: &[f64]| -> f64 {
            (0..batch)
                .map(|x| {
                    let p = direct_conv(w, &a.data()[x * 9..(x + 1) * 9], 1, 1, 2, 2, 3, 3);
                    p.iter().zip(&db.data()[x * 4..(x + 1) * 4]).map(|(p, t)| (t - p).powi(2)).sum::<f64>()
                })
                .sum()
        };
        // gradient descent with a central-difference gradient of the objective
        let mut w = vec![0.0; 4];
        let step = 0.02;
        for _ in 0..200_000 {
            let mut grad = [0.0; 4];
            for i in 0..4 {
                let mut hi = w.clone();
                let mut lo = w.clone();
                hi[i] += 1e-4;
                lo[i] -= 1e-4;
                grad[i] = (objective(&hi) - objective(&lo)) / 2e-4;
            }
            if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-12 {
                break;
            }
            for i in 0..4 {
                w[i] -= step * grad[i];
            }
        }
        assert!((objective(&w) - res.weight_residual).abs() < 1e-6);
        for (a, b) in w.iter().zip(res.delta_prime_w.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_oracle_guard() {
        let conv = conv_with(Tensor::filled(&[1, 60, 3, 3], 0.1));
        let a = Tensor::filled(&[1, 60, 3, 3], 1.0);
        let db = Tensor::filled(&[1, 1, 1, 1], 1.0);
        assert!(matches!(
            exact_backmatch_conv(&conv, &a, &db, 0.0),
            Err(Error::TooLarge { unknowns: 540, .. })
        ));
    }

    #[test]
    fn conv_uncovered_input_is_zero_interaction() {
        // stride 3 with a 1x1 kernel never touches most input positions
        let conv = Conv2d::new(Tensor::filled(&[1, 1, 1, 1], 1.0), 3, 0).unwrap();
        let a = Tensor::filled(&[2, 1, 4, 4], 1.0);
        let db = Tensor::filled(&[2, 1, 2, 2], 1.0);
        let _ = ConvGeometry::square(1, 3, 0);
        assert!(matches!(
            exact_backmatch_conv(&conv, &a, &db, 1.0),
            Err(Error::ZeroInteraction { neuron: 1 })
        ));
    }

    fn lenet(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::build(&ArchSpec::Preset(Preset::LenetBn), &[3, 32, 32], 10, &mut rng).unwrap()
    }

    #[test]
    fn lenet_sharing_factors() {
        let net = lenet(1);
        let cv1 = layer_ratio(&net, 0).unwrap();
        let cv2 = layer_ratio(&net, 4).unwrap();
        assert_eq!(cv1.sharing, 196.0);
        assert_eq!(cv2.sharing, 25.0);
        assert_eq!(cv2.norms["c"], 196.0 / 25.0);
        for i in [9, 10, 11, 12] {
            assert_eq!(layer_ratio(&net, i).unwrap().sharing, 1.0);
        }
    }

    #[test]
    fn orthonormal_fc_has_unit_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 4x4 rotation-like orthonormal matrix via whitening
        let q = whitened_batch(4, 4, &mut rng).unwrap().as_tensor().scale(0.5);
        let net = Network::from_layers(
            vec![Layer::FullyConnected(FullyConnected::new(Matrix::from_tensor(q).unwrap()))],
            &[4],
            4,
        )
        .unwrap();
        assert!((layer_ratio(&net, 0).unwrap().ratio - 1.0).abs() < 1e-14);
    }

    #[test]
    fn single_fc_gradient_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = ArchSpec::Layers(vec![LayerSpec::Fc { out: 3 }]);
        let mut net = Network::build(&arch, &[6], 3, &mut rng).unwrap();
        let x = Tensor::from_fn(&[6, 4], |_| rng.random_range(-1.0..1.0));
        let bundle = net.forward_backward(&x, &[0, 1, 2, 0]).unwrap();
        let scaled = apply_backmatch_scaling(&net, &bundle).unwrap();
        assert_eq!(scaled.grads, bundle.grads);
    }

    #[test]
    fn neutral_factors_leave_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q1 = whitened_batch(4, 4, &mut rng).unwrap().as_tensor().scale(0.5);
        let q2 = whitened_batch(4, 4, &mut rng).unwrap().as_tensor().scale(0.5);
        let mut net = Network::from_layers(
            vec![
                Layer::FullyConnected(FullyConnected::new(Matrix::from_tensor(q1).unwrap())),
                Layer::Relu(crate::layers::Relu::new()),
                Layer::FullyConnected(FullyConnected::new(Matrix::from_tensor(q2).unwrap())),
            ],
            &[4],
            4,
        )
        .unwrap();
        let x = Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0));
        let bundle = net.forward_backward(&x, &[0, 1, 2, 3, 0]).unwrap();
        let scaled = apply_backmatch_scaling(&net, &bundle).unwrap();
        for (s, g) in scaled.grads.iter().zip(&bundle.grads) {
            assert!(s.grad.max_abs_diff(&g.grad).unwrap() < 1e-14);
        }
    }

    #[test]
    fn whitened_input_scaled_gradient_equals_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let batch = 16;
        let w1 = random_matrix(&mut rng, 3, 5);
        // orthonormal columns on the layer above give it r == 1
        let w2 = whitened_batch(3, 6, &mut rng).unwrap().transpose().as_tensor().scale(1.0 / 6f64.sqrt());
        let mut net = Network::from_layers(
            vec![
                Layer::FullyConnected(FullyConnected::new(w1.clone())),
                Layer::FullyConnected(FullyConnected::new(Matrix::from_tensor(w2).unwrap())),
            ],
            &[5],
            6,
        )
        .unwrap();
        assert!((layer_ratio(&net, 1).unwrap().ratio - 1.0).abs() < 1e-14);
        let a = whitened_batch(5, batch, &mut rng).unwrap();
        let labels: Vec<usize> = (0..batch).map(|i| i % 6).collect();
        let bundle = net
            .forward_backward_with(a.as_tensor(), &labels, true)
            .unwrap();
        let scaled = apply_backmatch_scaling(&net, &bundle).unwrap();
        // per-sample signal at fc1's output; the bundle's carries the 1/batch of the mean loss
        let db = bundle.input_grads.as_ref().unwrap()[1].scale(batch as f64);
        let exact = exact_backmatch_fc(&w1, &a, &Matrix::from_tensor(db).unwrap(), 0.0).unwrap();
        assert!(scaled.grads[0].grad.max_abs_diff(&exact.delta_prime_w).unwrap() < 1e-8);
    }

    #[test]
    fn walk_stays_positive_and_preserves_direction() {
        let mut net = lenet(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(&[3, 3, 32, 32], |_| rng.random_range(-1.0..1.0));
        let bundle = net.forward_backward(&x, &[1, 2, 3]).unwrap();
        let scaled = apply_backmatch_scaling(&net, &bundle).unwrap();
        assert!(scaled.trace.iter().all(|s| s.m_output > 0.0 && s.m_input > 0.0));
        for (s, g) in scaled.grads.iter().zip(&bundle.grads) {
            let cos = s.grad.dot(&g.grad).unwrap() / (s.grad.norm() * g.grad.norm());
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_state_rejects_nonpositive() {
        let mut st = FactorState::new();
        assert_eq!(st.value(), 1.0);
        st.absorb(0, 2.0).unwrap();
        assert!(matches!(st.absorb(3, 0.0), Err(Error::CorruptedFactor { layer: 3, .. })));
        assert!(st.absorb(3, f64::NAN).is_err());
        st.reset();
        assert_eq!(st.value(), 1.0);
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let net = Network::from_layers(
            vec![Layer::FullyConnected(FullyConnected::new(Matrix::zeros(2, 3)))],
            &[3],
            2,
        )
        .unwrap();
        assert!(matches!(layer_ratio(&net, 0), Err(Error::DegenerateWeight { layer: 0 })));
    }

    #[test]
    fn closed_form_matches_walk() {
        let net = lenet(9);
        let trace = factor_walk(&net).unwrap();
        for (layer, expected) in lenet_closed_form(&net).unwrap() {
            let got = trace.iter().find(|s| s.layer == layer).unwrap().scale.unwrap();
            assert!(((got - expected) / expected).abs() < 1e-12, "layer {layer}");
        }
    }
}
