//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of stream coordinates into a base seed.
pub fn derive(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, coords))
}

// Stream tags; distinct so that no two consumers share a random sequence.
pub(crate) const STREAM_BATCH: u64 = 1;
pub(crate) const STREAM_DROPOUT: u64 = 2;
pub(crate) const STREAM_INIT: u64 = 3;
pub(crate) const STREAM_SPLIT: u64 = 4;
pub(crate) const STREAM_SYNTH: u64 = 5;
