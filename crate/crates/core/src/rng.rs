//! Counter-based seed splitting.
//!
//! Every random stream in the pipeline is derived from one master seed, a
//! stream label, and an integer key path. Streams are therefore independent of
//! scheduling order, which keeps parallel runs reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const fn fnv1a(label: &str) -> u64 {
    let bytes = label.as_bytes();
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut i = 0;
    while i < bytes.len() {
        hash ^= bytes[i] as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        i += 1;
    }
    hash
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `(seed, label, keys)` into a 64-bit value.
pub fn mix(seed: u64, label: &str, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ fnv1a(label));
    for &k in keys {
        h = splitmix(h ^ k);
    }
    h
}

/// Uniform draw in (0, 1) from a key path. Never returns 0 or 1.
pub fn uniform(seed: u64, label: &str, keys: &[u64]) -> f64 {
    let bits = mix(seed, label, keys) >> 11;
    (bits as f64 + 0.5) / (1u64 << 53) as f64
}

/// Independent ChaCha stream for a key path.
pub fn stream(seed: u64, label: &str, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label, keys))
}
