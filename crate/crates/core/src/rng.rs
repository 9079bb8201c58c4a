//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `seed` and, where work is split
//! into independent trials or items, a stream index. Streams are ChaCha8 with
//! the index selecting the ChaCha stream, so serial and parallel schedules
//! draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Two-level stream for nested indices (e.g. epoch and item).
pub fn substream(seed: u64, outer: u64, inner: u64) -> Rng {
    stream(seed ^ outer.wrapping_mul(0x9E37_79B9_7F4A_7C15), inner)
}

pub fn normal_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
