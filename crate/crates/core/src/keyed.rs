//! Counter-based keyed randomness.
//!
//! Every random quantity in the crate is a pure function of a key tuple
//! (seed, user, counter), so the same user receives the same draw no matter
//! where or how often it shows up in a stream.

use xxhash_rust::xxh3::xxh3_64;

/// Stable 64-bit key of an opaque user identifier.
///
/// Integer tokens are keyed through their decimal text, so `"42"` read from a
/// file and the integer `42` map to the same key.
#[inline]
pub fn user_key(user_id: &str) -> u64 {
    xxh3_64(user_id.as_bytes())
}

/// splitmix64 output function.
#[inline]
pub fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Keyed hash of `(seed, key, counter)`.
#[inline]
pub fn mix3(seed: u64, key: u64, counter: u64) -> u64 {
    let h = finalize(seed.wrapping_add(GOLDEN));
    let h = finalize(h ^ key.wrapping_mul(GOLDEN));
    finalize(h ^ counter.wrapping_add(1).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Uniform in `[0, 1)` from the top 53 bits.
#[inline]
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derive an independent sub-seed, e.g. one per simulated test.
#[inline]
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix3(seed, stream, index)
}
