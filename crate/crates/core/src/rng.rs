//! Named, isolated random streams derived from a single seed.
//!
//! Initialization, shuffling, augmentation and synthetic data each draw from
//! their own ChaCha stream, so changing how one of them consumes randomness
//! never perturbs the others. Paired runs rely on this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Data = 4,
    Probe = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A generator keyed by `(seed, stream, keys...)`, e.g. `(seed, Augment, epoch, index)`.
pub fn keyed_rng(seed: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    let mixed = keys.iter().fold(splitmix(seed), |acc, k| splitmix(acc ^ splitmix(*k)));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(stream as u64);
    rng
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
