//! Seed derivation so every consumer gets an independent, schedule-free stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, kept in one place so no two consumers collide.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const CLEAN_TRAIN: u64 = 3;
    pub const AUX_POISON: u64 = 4;
    pub const VGAE: u64 = 5;
    pub const ATTACK_NOISE: u64 = 6;
    pub const PROJECTION: u64 = 7;
    pub const CLEAN_REFERENCE: u64 = 8;
}
