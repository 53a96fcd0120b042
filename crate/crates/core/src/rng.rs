//! Seeded random streams.
//!
//! Every consumer of randomness takes an explicit `(seed, stream)` pair so that
//! runs are reproducible and parallel work never shares a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_TEACHER: u64 = 0;
pub const STREAM_STUDENT: u64 = 1;
pub const STREAM_SAMPLES: u64 = 2;
pub const STREAM_XI: u64 = 3;
pub const STREAM_EMBED: u64 = 4;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, used to derive child seeds from a parent seed and an
/// index without correlating neighbouring indices.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
