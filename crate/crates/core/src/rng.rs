//! Keyed random streams. Every consumer derives its own generator from the
//! experiment seed plus a tag path, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BACKBONE: u64 = 1;
pub const TEACHER: u64 = 2;
pub const DATA: u64 = 3;
pub const ADAPTER_INIT: u64 = 4;
pub const WARMUP: u64 = 5;
pub const ROUND: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |h, &t| splitmix64(h ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tags))
}
