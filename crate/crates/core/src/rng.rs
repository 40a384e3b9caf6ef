//! Seed derivation.
//!
//! Every stochastic operation draws from a ChaCha stream whose seed is a pure
//! function of the run's base seed and a path of counters, so any sub-stream
//! can be recreated without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a counter path.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &c| {
        splitmix(acc ^ splitmix(c.wrapping_add(GOLDEN)))
    })
}

pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Stream labels, kept distinct so sub-streams never collide.
pub mod label {
    pub const TRAJECTORY: u64 = 1;
    pub const JITTER: u64 = 2;
    pub const STEP: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const REPORT: u64 = 6;
    pub const SCENE: u64 = 7;
    pub const CORPUS: u64 = 8;
    pub const INIT: u64 = 9;
    pub const VALIDATION: u64 = 10;
}
