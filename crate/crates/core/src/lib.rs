//! Latent-space model-based reinforcement learning with a per-timestep
//! bisimulation-metric encoder loss and MPPI planning, plus an exact
//! tabular bisimulation oracle for checking value and return bounds.

pub mod bisim;
pub mod config;
pub mod envs;
pub mod error;
pub mod losses;
pub mod models;
pub mod nncore;
pub mod planner;
pub mod trainer;

pub use error::{Error, Result};
pub use nncore::{Checkpoint, DenseArray, ParamSet, ParamStore, Tape, Var};

/// Seedable, serializable RNG used everywhere in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Convenience constructor for [`Rng`].
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
