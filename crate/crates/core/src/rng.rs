//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 seeded through
//! [`stream`], which mixes a global seed with a path of integers (epoch,
//! batch index, writer id, ...) using SplitMix64. The same seed reproduces the
//! same values on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator for `seed` and the given sub-stream path.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut state = splitmix64(seed);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Named sub-stream tags, so unrelated consumers never share a stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const HEAD: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const WD_SPLIT: u64 = 6;
    pub const NEGATIVES: u64 = 7;
}
