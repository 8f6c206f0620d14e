//! Deterministic seeding helpers.
//!
//! Every stochastic component in the toolkit draws from a [`ChaCha8Rng`]
//! seeded through these helpers, so runs are reproducible bit-for-bit across
//! platforms. Sub-streams are derived by hashing a textual tag into the base
//! seed, which keeps independent components (noise draws, defenses,
//! per-item attack starts) decorrelated without any shared mutable state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a hash of a byte string.
#[must_use]
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer; a cheap bijective scrambler for seed mixing.
#[must_use]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a base seed and a textual tag.
#[must_use]
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    splitmix64(base ^ fnv1a(tag.as_bytes()))
}

/// Derives a sub-seed keyed by a tag and an index (e.g. a dataset item).
#[must_use]
pub fn derive_seed_indexed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(base, tag) ^ splitmix64(index))
}

/// A deterministic RNG for the given seed.
#[must_use]
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
