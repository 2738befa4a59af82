//! Seed derivation.
//!
//! Every random stream in a run is derived from one root seed by mixing in a
//! component tag, so a single stage can be rerun in isolation and still draw
//! the same numbers it drew inside a full pipeline run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes.
fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives a sub-seed as `mix(root ^ hash(tag))`.
pub fn derive(root: u64, tag: &str) -> u64 {
    mix(root ^ tag_hash(tag))
}

/// Derives a sub-seed for the `index`-th item of a tagged stream.
pub fn derive_indexed(root: u64, tag: &str, index: u64) -> u64 {
    mix(derive(root, tag) ^ mix(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
