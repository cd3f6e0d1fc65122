//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from
//! `(seed, domain, index)` through a SplitMix64 mix. ChaCha8 output is
//! specified bit-for-bit, so datasets and training runs reproduce across
//! platforms and across serial/parallel execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct domains never share a child seed for the same index.
pub mod domain {
    pub const ENVIRONMENT: u64 = 0x454e_5649;
    pub const TRAIN_SITE: u64 = 0x5452_4149;
    pub const TEST_SITE: u64 = 0x5445_5354;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const INIT: u64 = 0x494e_4954;
    pub const EPOCH: u64 = 0x4550_4f43;
    pub const VALIDATION: u64 = 0x5641_4c49;
    pub const LAYOUT: u64 = 0x4c41_594f;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn child_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ domain) ^ index)
}

pub fn child_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, domain, index))
}
