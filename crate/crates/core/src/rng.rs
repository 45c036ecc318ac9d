//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a hash of named parts, so streams never overlap and reordering
//! one consumer cannot perturb another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Stream tags.
pub mod tag {
    pub const TRAIN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const PROMPTS: u64 = 3;
    pub const ADAPTER_INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const BUFFER: u64 = 6;
    pub const SELECTOR: u64 = 7;
    pub const PRETRAIN: u64 = 8;
    pub const ORDER: u64 = 9;
    pub const BASE_DATA: u64 = 10;
}
