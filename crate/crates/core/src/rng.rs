// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counter-based seed splitting: every consumer derives its own stream from
//! the run seed and a stable tag, so adding a consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a tag name.
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn split(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(split(seed, tag(name)))
}

/// Stream for item `index` of the named consumer.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(split(split(seed, tag(name)), index))
}
