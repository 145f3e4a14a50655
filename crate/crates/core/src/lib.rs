//! Class-incremental learning on a fixed compute budget.
//!
//! The backbone is built from [`eim::EimLayer`]s whose new-class adapters
//! fold back into frozen weights after every phase, so the model never
//! grows. Old classes are retained through per-class feature prototypes
//! ([`memory`]) and a feature-distillation term ([`train`]); incremental
//! training data is thinned with EL2N scores ([`pruning`]).

pub mod backbone;
pub mod eim;
pub mod error;
pub mod harness;
pub mod memory;
pub mod numeric;
pub mod pruning;
pub mod train;

pub use error::{Error, IdxError, Result};

use rand::SeedableRng;

/// The engine's only PRNG.
pub type Rng = rand_xoshiro::Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
