//! Named random sub-streams derived from a single master seed.
//!
//! Each consumer (split, init, shuffle, negatives) draws from its own stream,
//! keyed by name and an index such as the user or epoch number, so partial
//! reruns and resumed runs see the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The PRNG used throughout the crate.
pub type Rng = ChaCha8Rng;

pub const STREAM_SPLIT: &str = "split";
pub const STREAM_INIT: &str = "init";
pub const STREAM_SHUFFLE: &str = "shuffle";
pub const STREAM_NEGATIVES: &str = "negatives";

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic 64-bit seed for `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let s = splitmix64(master ^ fnv1a(stream.as_bytes()));
    splitmix64(s ^ splitmix64(index))
}

pub fn stream_rng(master: u64, stream: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream, index))
}
