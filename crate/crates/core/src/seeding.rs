//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed mixed with stream tags, so results never depend on
//! the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, tags))
}

// Stream tags.
pub const TAG_FOLDS: u64 = 1;
pub const TAG_ENROLL: u64 = 2;
pub const TAG_INIT: u64 = 3;
pub const TAG_SHUFFLE: u64 = 4;
pub const TAG_DROPOUT: u64 = 5;
pub const TAG_RANDOM_MAP: u64 = 6;
pub const TAG_SPLIT: u64 = 7;
pub const TAG_POPULATION: u64 = 8;
pub const TAG_PLANT: u64 = 9;
pub const TAG_SAMPLES: u64 = 10;
pub const TAG_FEATURE_MAP: u64 = 11;
pub const TAG_MODEL: u64 = 12;
