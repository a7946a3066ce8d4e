//! Seeded random streams.
//!
//! Every generator in the crate draws from a [`Rng`] built from an explicit
//! seed. Per-sample streams are derived from `(seed, epoch, index)` so data
//! preparation can be reordered or fanned out without changing results.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream owned by one sample in one epoch.
pub fn child_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ epoch) ^ index)
}

pub fn child(seed: u64, epoch: u64, index: u64) -> Rng {
    seeded(child_seed(seed, epoch, index))
}
