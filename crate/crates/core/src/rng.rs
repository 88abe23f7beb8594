//! Seed derivation. Every random stream in the crate is keyed by the master
//! seed plus a path of integers, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Stream tags, kept distinct so unrelated consumers never share a stream.
pub mod tag {
    pub const SCENARIO: u64 = 1;
    pub const RENDER: u64 = 2;
    pub const LABEL_NOISE: u64 = 3;
    pub const POINT_COUNT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const AUGMENT: u64 = 8;
    pub const VAL_AUGMENT: u64 = 9;
    pub const SUBSET: u64 = 10;
    pub const PROBE: u64 = 11;
}
