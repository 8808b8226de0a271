//! Named random sub-streams derived from a single experiment seed.
//!
//! Every stage draws from its own stream (`"data"`, `"init"`, `"augment"`,
//! `"split"`, ...), so adding draws to one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic 64-bit key for `(seed, name)`.
pub fn stream_key(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(splitmix64(seed) ^ h)
}

pub fn stream(seed: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, name))
}

/// Sub-stream of a sub-stream, e.g. `substream(seed, "augment", epoch)`.
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(stream_key(seed, name) ^ splitmix64(index)))
}
