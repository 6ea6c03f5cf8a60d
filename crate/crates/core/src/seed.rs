//! Deterministic seed derivation. Every random stream in a run is derived
//! from one experiment seed plus a label, so runs replay bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a sequence of labels.
pub fn derive(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(seed), |acc, &l| mix64(acc ^ mix64(l)))
}

pub fn rng(seed: u64, labels: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive(seed, labels))
}

/// Uniform draw in `[0, 1)` from a derived seed, without any stream state.
pub fn unit_interval(seed: u64, labels: &[u64]) -> f64 {
    (derive(seed, labels) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub mod tags {
    pub const KEYGEN: u64 = 1;
    pub const INIT: u64 = 2;
    pub const ENCRYPT: u64 = 3;
    pub const MASK: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const DATA: u64 = 7;
    pub const NOISE: u64 = 8;
}
