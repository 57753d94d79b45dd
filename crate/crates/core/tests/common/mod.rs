//! Helpers shared by the integration tests: seeded layer geometries and a
//! central finite-difference gradient checker.
#![allow(dead_code)]

use bmnn_core::layers::{BatchNorm, Conv2d, Flatten, FullyConnected, Layer, MaxPool2d, Relu};
use bmnn_core::{Matrix, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Fc,
    Conv,
    BatchNorm,
    Relu,
    MaxPool,
    Flatten,
}

pub const KINDS: [Kind; 6] = [Kind::Fc, Kind::Conv, Kind::BatchNorm, Kind::Relu, Kind::MaxPool, Kind::Flatten];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so a ReLU kink is never inside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values at least 0.01 apart, so pooling winners never swap.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// A seeded random layer of the given kind together with a fitting input batch.
pub fn case(kind: Kind, seed: u64) -> (Layer, Tensor) {
    let mut r = rng(seed.wrapping_mul(7919).wrapping_add(kind as u64));
    match kind {
        Kind::Fc => {
            let (inp, out, batch) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..6));
            let w = Matrix::from_fn(out, inp, |_, _| r.random_range(-1.0..1.0));
            let x = uniform(&mut r, &[inp, batch]);
            (Layer::FullyConnected(FullyConnected::new(w)), x)
        }
        Kind::Conv => {
            let (c, n): (usize, usize) = (r.random_range(1..4), r.random_range(1..4));
            let (kh, kw): (usize, usize) = (r.random_range(1..4), r.random_range(1..4));
            let stride: usize = r.random_range(1..3);
            let padding: usize = r.random_range(0..2);
            let (q1, q2): (usize, usize) = (r.random_range(1..4), r.random_range(1..4));
            // smallest input giving (q1, q2) outputs, then at least one pixel
            let h = ((q1 - 1) * stride + kh).saturating_sub(2 * padding).max(1);
            let w = ((q2 - 1) * stride + kw).saturating_sub(2 * padding).max(1);
            let (h, w) = fit_geometry(h, w, kh, kw, stride, padding);
            let batch = r.random_range(1..4);
            let weights = uniform(&mut r, &[n, c, kh, kw]);
            let x = uniform(&mut r, &[batch, c, h, w]);
            (Layer::Conv2d(Conv2d::new(weights, stride, padding).unwrap()), x)
        }
        Kind::BatchNorm => {
            if seed % 2 == 0 {
                let (f, batch) = (r.random_range(1..5), r.random_range(2..6));
                (Layer::BatchNorm(BatchNorm::new(f)), uniform(&mut r, &[f, batch]))
            } else {
                let (c, h, w, batch) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4), r.random_range(2..4));
                (Layer::BatchNorm(BatchNorm::new(c)), uniform(&mut r, &[batch, c, h, w]))
            }
        }
        Kind::Relu => {
            let shape = if seed % 2 == 0 {
                vec![r.random_range(1..6), r.random_range(1..6)]
            } else {
                vec![r.random_range(1..3), r.random_range(1..3), r.random_range(1..4), r.random_range(1..4)]
            };
            (Layer::Relu(Relu::new()), away_from_zero(&mut r, &shape))
        }
        Kind::MaxPool => {
            let window = r.random_range(1..4);
            let shape = [
                r.random_range(1..3),
                r.random_range(1..3),
                window * r.random_range(1..4),
                window * r.random_range(1..4),
            ];
            (Layer::MaxPool2d(MaxPool2d::new(window).unwrap()), spaced(&mut r, &shape))
        }
        Kind::Flatten => {
            let shape = [r.random_range(1..4), r.random_range(1..3), r.random_range(1..4), r.random_range(1..4)];
            (Layer::Flatten(Flatten::new()), uniform(&mut r, &shape))
        }
    }
}

/// Grows `(h, w)` until the stride divides the padded extent.
fn fit_geometry(mut h: usize, mut w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> (usize, usize) {
    while h + 2 * padding < kh || (h + 2 * padding - kh) % stride != 0 {
        h += 1;
    }
    while w + 2 * padding < kw || (w + 2 * padding - kw) % stride != 0 {
        w += 1;
    }
    (h, w)
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn projected(layer: &Layer, input: &Tensor, probe: &Tensor) -> f64 {
    let mut l = layer.clone();
    let out = l.forward(input, true).unwrap();
    out.dot(probe).unwrap()
}

/// Relative errors of the backpropagated input and weight gradients of
/// `L = <probe, layer(x)>` against central differences.
pub fn layer_gradient_errors(layer: &Layer, input: &Tensor, seed: u64) -> (f64, Option<f64>) {
    let mut l = layer.clone();
    let out = l.forward(input, true).unwrap();
    let probe = uniform(&mut rng(seed ^ 0xABCD), out.shape());
    let grads = l.backward(&probe).unwrap();

    let mut fd_x = vec![0.0; input.len()];
    for (i, slot) in fd_x.iter_mut().enumerate() {
        let mut hi = input.clone();
        let mut lo = input.clone();
        hi.data_mut()[i] += FD_STEP;
        lo.data_mut()[i] -= FD_STEP;
        *slot = (projected(layer, &hi, &probe) - projected(layer, &lo, &probe)) / (2.0 * FD_STEP);
    }
    let input_err = rel_error(grads.input.data(), &fd_x);

    let weight_err = layer.weights().map(|w| {
        let mut fd_w = vec![0.0; w.len()];
        for (i, slot) in fd_w.iter_mut().enumerate() {
            let mut hi = layer.clone();
            let mut lo = layer.clone();
            hi.weights_mut().unwrap().data_mut()[i] += FD_STEP;
            lo.weights_mut().unwrap().data_mut()[i] -= FD_STEP;
            *slot = (projected(&hi, input, &probe) - projected(&lo, input, &probe)) / (2.0 * FD_STEP);
        }
        rel_error(grads.weights.as_ref().unwrap().data(), &fd_w)
    });
    (input_err, weight_err)
}

/// Worst relative error over `geometries` seeded cases of one layer kind.
pub fn worst_layer_error(kind: Kind, geometries: u64) -> f64 {
    (0..geometries)
        .map(|seed| {
            let (layer, x) = case(kind, seed);
            let (a, b) = layer_gradient_errors(&layer, &x, seed);
            a.max(b.unwrap_or(0.0))
        })
        .fold(0.0, f64::max)
}

/// Central-difference check of the softmax cross-entropy gradient on the logits.
pub fn loss_gradient_error(classes: usize, batch: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = Tensor::from_fn(&[classes, batch], |_| r.random_range(-2.0..2.0));
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
    let (_, grad) = bmnn_core::layers::loss_forward_backward(&logits, &labels).unwrap();
    let mut fd = vec![0.0; logits.len()];
    for (i, slot) in fd.iter_mut().enumerate() {
        let mut hi = logits.clone();
        let mut lo = logits.clone();
        hi.data_mut()[i] += FD_STEP;
        lo.data_mut()[i] -= FD_STEP;
        let (lh, _) = bmnn_core::layers::loss_forward_backward(&hi, &labels).unwrap();
        let (ll, _) = bmnn_core::layers::loss_forward_backward(&lo, &labels).unwrap();
        *slot = (lh - ll) / (2.0 * FD_STEP);
    }
    rel_error(grad.data(), &fd)
}
