//! Seed derivation.
//!
//! Every random stream in an experiment is keyed by a path of integer tags
//! (purpose, fold, sampler, client, round, ...) hashed together with the
//! master seed. Two streams with different paths never share state, which is
//! what keeps sampler trials independent of each other and of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// Tag values that name the purpose of a derived stream.
pub mod purpose {
    pub const PARTITION: u64 = 1;
    pub const CLIENT_FOLDS: u64 = 2;
    pub const INIT: u64 = 3;
    pub const GLOBAL_ROUND: u64 = 4;
    pub const RESAMPLE: u64 = 5;
    pub const PERSONALIZE: u64 = 6;
    pub const SYNTHETIC: u64 = 7;
    pub const FOLD: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `tags` into `master` one at a time.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(master), |acc, &tag| {
        splitmix64(acc ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}

pub fn stream(master: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tags))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
