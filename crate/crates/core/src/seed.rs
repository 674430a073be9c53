//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a base seed and a purpose path, so results do not depend on
//! thread scheduling or on which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `base` with each component of `path`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Purpose tags for [`derive`] paths.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const BUFFER: u64 = 4;
    pub const REPLAY: u64 = 5;
    pub const CAP: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const EPISODE: u64 = 8;
    pub const REGION: u64 = 9;
}
