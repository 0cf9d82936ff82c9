//! Seed derivation. Every random stream is keyed by `(base seed, stream id)`
//! so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix64(mix64(base) ^ stream.rotate_left(17))
}

pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Stream id namespaces, so different consumers of one base seed never
/// collide.
pub mod streams {
    pub const NOISE: u64 = 1 << 40;
    pub const COMPLEMENT: u64 = 2 << 40;
    pub const SHUFFLE: u64 = 3 << 40;
    pub const PLANTED: u64 = 4 << 40;
}
