//! Deterministic random streams derived from one master seed.
//!
//! Each consumer asks for `(master, domain, index)`; the triple is mixed into a
//! ChaCha seed so streams never overlap and do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Values are part of the reproducibility contract.
pub mod domain {
    pub const SCENE: u64 = 1;
    pub const START_POSE: u64 = 2;
    pub const DEMO: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const EPISODE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed; used when a seed must be stored or passed on.
pub fn derive(master: u64, domain: u64, index: u64) -> u64 {
    splitmix(splitmix(master ^ splitmix(domain)) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(master: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, domain, index))
}
