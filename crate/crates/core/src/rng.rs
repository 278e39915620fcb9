//! Seeding discipline.
//!
//! Every randomized operation in this crate draws from a ChaCha8 stream
//! whose seed is derived from (user seed, stream tag, unit index). Units
//! that may run concurrently (imputation chains, CV folds, trees) each own
//! an independent stream, so results never depend on scheduling or thread
//! count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one generator used across the crate.
pub type SeededRng = ChaCha8Rng;

/// Labels for independent substreams of a user seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Split = 1,
    ImputeChain = 2,
    LassoFolds = 3,
    ForestTree = 4,
    ForestTuneFolds = 5,
    ForestTuneFit = 6,
    Synth = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive the seed for substream `index` of `stream`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ ((stream as u64) << 56)) ^ index)
}

/// ChaCha8 stream from a raw (already derived) seed.
pub fn rng_from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// ChaCha8 stream for substream `index` of `stream`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> SeededRng {
    SeededRng::seed_from_u64(derive_seed(seed, stream, index))
}
