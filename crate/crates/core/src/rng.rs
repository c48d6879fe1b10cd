//! Seed derivation and generator construction.
//!
//! Every stochastic quantity in the crate is drawn from a ChaCha stream whose
//! seed is derived from a base seed and a path of labels. Two different label
//! paths give statistically independent streams, so callers can split a
//! single CLI seed into as many sub-streams as they need without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Label domains used when deriving sub-seeds.
pub mod domain {
    pub const TOKEN: u64 = 0x746f_6b65_6e00_0001;
    pub const POSITION: u64 = 0x706f_7369_7400_0002;
    pub const LAYER: u64 = 0x6c61_7965_7200_0003;
    pub const QUERY: u64 = 0x7175_6572_7900_0004;
    pub const PROMPT: u64 = 0x7072_6f6d_7074_0005;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a path of labels.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(base), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

/// Generator for the stream identified by `(base, labels)`.
pub fn stream(base: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, labels))
}

/// `len` independent draws from N(0, std²).
pub fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// 64-bit FNV-1a, used as the stable word hash of the toy tokenizer.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
