//! Seeded random streams.
//!
//! Every consumer of randomness derives its own stream from the run seed and a
//! short label, so adding a new consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Fnv;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sub-seed for the labelled stream `label` of run `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Fnv::default();
    h.write(&seed.to_le_bytes());
    h.write(label.as_bytes());
    h.finish()
}

pub fn stream(seed: u64, label: &str) -> Rng {
    seeded(derive_seed(seed, label))
}
