//! Stable seed-stream derivation.
//!
//! Every source of randomness in the crate draws from a `ChaCha8Rng` seeded
//! through [`stream_seed`], which mixes a base seed with a label and indices
//! via FNV-1a. The hash is written out by hand so streams never depend on
//! `std`'s unstable hasher: the same inputs give the same stream on every
//! platform and every build.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// Derive a stream seed from a base seed, a label, and numeric indices.
pub fn stream_seed(base: u64, label: &str, indices: &[u64]) -> u64 {
    let mut state = fnv1a(FNV_OFFSET, &base.to_le_bytes());
    state = fnv1a(state, label.as_bytes());
    for &ix in indices {
        state = fnv1a(state, &ix.to_le_bytes());
    }
    // Final avalanche (splitmix64) so that low-entropy inputs still spread.
    state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed stream keyed by a string id (task ids and the like).
pub fn stream_seed_str(base: u64, label: &str, id: &str, index: u64) -> u64 {
    let mut state = fnv1a(FNV_OFFSET, &base.to_le_bytes());
    state = fnv1a(state, label.as_bytes());
    state = fnv1a(state, id.as_bytes());
    state = fnv1a(state, &index.to_le_bytes());
    stream_seed(state, "", &[])
}

/// A deterministic RNG for the given stream seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
