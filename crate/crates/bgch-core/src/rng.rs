//! Seed handling.
//!
//! Every run owns a single `u64` seed. Each consumer of randomness draws from
//! its own named ChaCha stream derived from that seed, so adding draws in one
//! place (say, an extra dispersion redraw) never perturbs another (negative
//! sampling), and runs stay reproducible end to end.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Named consumers of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Embedding initialization.
    Init = 1,
    /// Dispersion direction redraws.
    Dispersion = 2,
    /// Negative sampling and batch shuffling.
    Sampling = 3,
    /// Train/test edge split.
    Split = 4,
}

/// RNG for one named stream of a run seed.
pub fn stream(seed: u64, which: Stream) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// One standard-normal draw.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `len` independent standard-normal draws.
pub fn normal_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| normal(rng)).collect()
}
