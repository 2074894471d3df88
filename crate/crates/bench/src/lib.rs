//! Shared fixtures for the criterion benches.

use bsmpc_core::losses::permute_batch;
use bsmpc_core::losses::timing::synthetic_batch;
use bsmpc_core::losses::SegmentBatch;
use bsmpc_core::models::{ModelConfig, ModelSet};
use bsmpc_core::rng_from_seed;
use rand::Rng as _;

/// Pendulum-sized models at desk widths (hidden 64, latent 16).
pub fn desk_models(seed: u64) -> ModelSet {
    ModelSet::new(ModelConfig::desk(3, 1), &mut rng_from_seed(seed)).expect("desk config is valid")
}

/// Synthetic segment batch and a batch permutation for the models above.
pub fn loss_inputs(batch: usize, horizon: usize, seed: u64) -> (SegmentBatch, Vec<usize>) {
    let b = synthetic_batch(batch, horizon, 3, 1, seed);
    let perm = permute_batch(batch, &mut rng_from_seed(seed ^ 0x9E37)).expect("batch of at least two");
    (b, perm)
}

/// Random distribution on `n` points with roughly `density · n` nonzeros.
pub fn random_distribution(n: usize, density: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let mut p: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < density { rng.random::<f64>() } else { 0.0 }).collect();
    if p.iter().all(|x| *x == 0.0) {
        p[0] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// `|i - j|` ground cost on `n` points, row-major.
pub fn line_cost(n: usize) -> Vec<f64> {
    (0..n * n).map(|k| (k / n).abs_diff(k % n) as f64).collect()
}
