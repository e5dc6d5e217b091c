//! Seed derivation and keyed random streams.
//!
//! Every stochastic decision in a run is drawn from a ChaCha stream whose key
//! is derived from the run seed plus explicit counters (step, example index,
//! purpose). Results therefore do not depend on evaluation order or on how
//! work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of tags into a base seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

/// Counter-based stream: the generator for `(seed, stream)` is independent of
/// any other stream and reproducible without generating its predecessors.
pub fn keyed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Purpose tags so that independent uses of the same run seed never collide.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const GAMMA: u64 = 3;
    pub const ROUTE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const BASELINE_MIX: u64 = 6;
    pub const SYNTHESIS: u64 = 7;
    pub const TEST_SPLIT: u64 = 8;
}
