//! Fixtures shared by the kernel benchmarks in `benches/`.

use bmnn_core::rng::{stream_rng, Stream};
use bmnn_core::{ArchSpec, Matrix, Network, Preset, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

pub const SEED: u64 = 17;

/// Standard-normal tensor of the given shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, Stream::Probe);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream_rng(seed, Stream::Probe);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// A freshly initialized BN-LeNet for 3x32x32 input and 10 classes.
pub fn lenet() -> Network {
    let mut rng = stream_rng(SEED, Stream::Init);
    Network::build(&ArchSpec::Preset(Preset::LenetBn), &[3, 32, 32], 10, &mut rng)
        .expect("lenet-bn builds")
}

/// An image batch with cyclic labels.
pub fn image_batch(batch: usize) -> (Tensor, Vec<usize>) {
    (random_tensor(&[batch, 3, 32, 32], SEED + 1), (0..batch).map(|i| i % 10).collect())
}
