//! Seed derivation so that every frame, tree and injection owns an
//! independent random stream that does not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide deterministic generator.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a domain tag and an index.
pub fn derive(base: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(domain)) ^ index)
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, domain: u64, index: u64) -> Rng {
    rng(derive(base, domain, index))
}
