//! Seed splitting.
//!
//! Every random stream is derived from one user-supplied seed as
//! `splitmix64(base ^ fnv1a(tag) ^ splitmix64(index))`, so each consumer
//! (a dataset sample, a parameter initializer, a batch shuffler) owns an
//! independent stream whose bytes do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Child seed for stream `tag` at position `index`.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(base ^ fnv1a(tag) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tag: &str, index: u64) -> Rng {
    rng(derive(base, tag, index))
}
