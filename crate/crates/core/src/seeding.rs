//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by a tuple of
//! integers (run seed, role, indices...). Streams for different roles never
//! share state, so adding a draw in one place cannot shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a tuple of integers into one 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_0F_C0DE_u64, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(parts))
}

/// Role tags keep streams for different purposes apart.
pub mod role {
    pub const PROTOTYPE: u64 = 1;
    pub const SAMPLE_NOISE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SHIFT: u64 = 4;
    pub const ENCODER_INIT: u64 = 5;
    pub const PRETRAIN: u64 = 6;
    pub const CONTEXT_INIT: u64 = 7;
    pub const META_INIT: u64 = 8;
    pub const SHUFFLE: u64 = 9;
    pub const TRAIN_MASK: u64 = 10;
    pub const EVAL_MASK: u64 = 11;
}
