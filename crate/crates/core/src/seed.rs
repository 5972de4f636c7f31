//! Deterministic derivation of independent RNG streams.
//!
//! Every random decision in a run is drawn from a ChaCha stream whose seed is
//! a pure function of the run seed and a path of integer labels (epoch,
//! episode index, purpose, ...). No generator state has to be persisted: the
//! labels are the cursor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes, mixed into the derived seed so that streams with equal
/// counters never collide.
pub mod purpose {
    pub const ROLLOUT: u64 = 0x524f_4c4c;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const INIT: u64 = 0x494e_4954;
    pub const EVAL: u64 = 0x4556_414c;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `labels` into `seed`.
pub fn derive(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    rng(derive(seed, labels))
}
