//! Seed derivation for reproducible, parallel-safe random streams.
//!
//! Every random draw in the toolkit flows from a named `u64` seed through
//! [`substream`]. Per-index streams are derived independently, so iterating
//! UEs serially or in parallel produces bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby (seed, index) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent RNG for stream `label` and element `index` under a
/// root seed.
pub fn substream(seed: u64, label: u64, index: u64) -> ChaCha8Rng {
    let derived = mix(mix(seed ^ mix(label)) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93));
    ChaCha8Rng::seed_from_u64(derived)
}

/// Stream labels; one per independent consumer of randomness.
pub mod stream {
    pub const UE_POSITION: u64 = 1;
    pub const PATH_PHASE: u64 = 2;
    pub const SHADOWING: u64 = 3;
    pub const MEASUREMENT: u64 = 4;
    pub const CODEBOOK_INIT: u64 = 5;
    pub const CODEBOOK_BATCH: u64 = 6;
    pub const CODEBOOK_NOISE: u64 = 7;
    pub const MODEL_INIT: u64 = 8;
    pub const TRAIN_BATCH: u64 = 9;
    pub const TRAIN_TIME: u64 = 10;
    pub const TRAIN_BASE_NOISE: u64 = 11;
    pub const TRAIN_MEASURE: u64 = 12;
    pub const SAMPLER: u64 = 13;
    pub const EVAL: u64 = 14;
    pub const LOGDET_METRIC: u64 = 15;
}
