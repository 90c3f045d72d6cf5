//! Deterministic per-purpose random streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(run seed, step, purpose, query index, candidate index)`, so results do not
//! depend on evaluation order and a resumed run needs no generator state
//! beyond the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags mixed into the stream key.
pub mod purpose {
    pub const TASKS: u64 = 1;
    pub const CANDIDATE: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const INIT: u64 = 5;
    pub const ENV: u64 = 6;
    pub const SAMPLE: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes an ordered key into a 64-bit stream id.
pub fn stream_id(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_id(seed, parts))
}
