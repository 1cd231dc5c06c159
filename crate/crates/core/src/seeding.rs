//! Derivation of independent deterministic RNG streams from one run seed.
//! Every consumer (corpus generator, mask draw, shuffle) gets its own
//! stream keyed by a label and indices, so adding a consumer never shifts
//! the values another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over arbitrary bytes; stable, endian-independent.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer; scrambles structured inputs into seed material.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Combine a run seed, a stream label, and indices into one RNG seed.
pub(crate) fn stream_seed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ fnv1a(label.as_bytes()));
    for &i in indices {
        acc = splitmix64(acc ^ i);
    }
    acc
}

pub(crate) fn stream_rng(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label, indices))
}
