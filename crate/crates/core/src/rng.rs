//! Seed derivation.
//!
//! Every random stream in a run is a ChaCha8 generator seeded from
//! `derive_seed(root, &[domain, ...])`, so no stream depends on the order in
//! which clients happen to be processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Domain tags keep streams for different purposes independent.
pub mod domain {
    pub const SPLIT: u64 = 0x01;
    pub const CLIENT_INIT: u64 = 0x02;
    pub const LOCAL_TRAIN: u64 = 0x03;
    pub const HYPERPLANES: u64 = 0x04;
    pub const TARGETS: u64 = 0x05;
    pub const ADVERSARY_DATA: u64 = 0x06;
    pub const SHARED_USER: u64 = 0x07;
    pub const SYNTHETIC: u64 = 0x08;
    pub const SHARED_INIT: u64 = 0x09;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(root), |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn stream(root: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(root, parts))
}
