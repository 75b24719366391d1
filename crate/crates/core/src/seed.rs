//! Seed splitting.
//!
//! Every random stream is derived from one master seed:
//!
//! ```text
//! split(seed, purpose, index) = splitmix64(seed ^ fnv1a64(purpose) ^ splitmix64(index))
//! ```
//!
//! so phantom `i` of a dataset uses `split(seed, "phantom", i)`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn split(seed: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(seed ^ fnv1a64(purpose) ^ splitmix64(index))
}

pub fn rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split(seed, purpose, index))
}
