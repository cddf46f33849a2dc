//! Seed derivation.
//!
//! All randomness comes from one root seed. A component asks for a stream by name:
//! `subseed = splitmix64(root ^ fnv1a64(name))`, and the stream itself is ChaCha8 seeded with
//! that 64-bit value through `rand_chacha::ChaCha8Rng::seed_from_u64`. Both steps are fixed
//! algorithms, so plans and samples are reproducible across implementations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for the stream called `name` under `root`.
pub fn subseed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a64(name.as_bytes()))
}

/// Seed for the `index`-th child of `seed` (e.g. per-sample or per-step streams).
pub fn child(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(subseed(root, name))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
