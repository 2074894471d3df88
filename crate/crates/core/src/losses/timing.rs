//! Wall-clock comparison of the per-step-parallel objective against the
//! sequential latent-rollout reference on identical synthetic batches.

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{permute_batch, sequential_rollout_loss, total_model_loss, LossCoefficients, ModelLossOutput, SegmentBatch};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelSet};
use crate::nncore::DenseArray;
use crate::rng_from_seed;

#[derive(Clone, Debug)]
pub struct LossBenchConfig {
    pub batch: usize,
    pub horizon: usize,
    pub workers: Vec<usize>,
    pub repeats: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for LossBenchConfig {
    fn default() -> Self {
        LossBenchConfig { batch: 256, horizon: 5, workers: vec![1, 4], repeats: 10, state_dim: 3, action_dim: 1, hidden_dim: 64, latent_dim: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingRow {
    pub variant: String,
    pub workers: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Mean time of the `W = 1` parallel variant over this row's mean.
    pub speedup_vs_w1: f64,
    /// Mean time of the sequential reference over this row's mean.
    pub speedup_vs_sequential: f64,
    /// Largest relative difference to the `W = 1` result (loss and
    /// gradients); 0 for the reference rows.
    pub max_rel_diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LossBenchReport {
    pub rows: Vec<TimingRow>,
    pub available_cores: usize,
}

impl LossBenchReport {
    pub fn max_rel_diff(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_diff).fold(0.0, f64::max)
    }

    pub fn row(&self, variant: &str, workers: usize) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.variant == variant && r.workers == workers)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>7} {:>10} {:>9} {:>9} {:>9} {:>11}\n", "variant", "workers", "mean_ms", "std_ms", "vs_w1", "vs_seq", "max_rel");
        for r in &self.rows {
            s += &format!(
                "{:<12} {:>7} {:>10.3} {:>9.3} {:>9.3} {:>9.3} {:>11.2e}\n",
                r.variant, r.workers, r.mean_ms, r.std_ms, r.speedup_vs_w1, r.speedup_vs_sequential, r.max_rel_diff
            );
        }
        s + &format!("cores available: {}\n", self.available_cores)
    }
}

/// Gaussian observations, actions and rewards.
pub fn synthetic_batch(batch: usize, horizon: usize, state_dim: usize, action_dim: usize, seed: u64) -> SegmentBatch {
    let mut rng = rng_from_seed(seed);
    let mut mat = |rows: usize, cols: usize| {
        let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        DenseArray::from_raw(vec![rows, cols], data)
    };
    SegmentBatch {
        obs: (0..horizon + 2).map(|_| mat(batch, state_dim)).collect(),
        actions: (0..horizon + 1).map(|_| mat(batch, action_dim)).collect(),
        rewards: (0..horizon + 1).map(|_| mat(batch, 1)).collect(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Relative difference of loss and every gradient entry.
pub fn output_rel_diff(a: &ModelLossOutput, b: &ModelLossOutput) -> f64 {
    let mut worst = rel(a.breakdown.total, b.breakdown.total);
    for (k, ga) in &a.grads {
        match b.grads.get(k) {
            Some(gb) => {
                for (x, y) in ga.data().iter().zip(gb.data()) {
                    // Entries that are zero up to rounding compare absolutely.
                    let d = if x.abs().max(y.abs()) < 1e-12 { (x - y).abs() } else { rel(*x, *y) };
                    worst = worst.max(d);
                }
            }
            None => return f64::INFINITY,
        }
    }
    worst
}

fn stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn run_loss_bench(cfg: &LossBenchConfig) -> Result<LossBenchReport> {
    if cfg.repeats == 0 {
        return Err(Error::Config { key: "repeats".into(), msg: "must be at least 1".into() });
    }
    if cfg.workers.is_empty() || cfg.workers.contains(&0) {
        return Err(Error::Config { key: "workers".into(), msg: "need a non-empty list of positive worker counts".into() });
    }
    let mcfg = ModelConfig { latent_dim: cfg.latent_dim, hidden_dim: cfg.hidden_dim, ..ModelConfig::desk(cfg.state_dim, cfg.action_dim) };
    let mut rng = rng_from_seed(cfg.seed);
    let models = ModelSet::new(mcfg, &mut rng)?;
    let batch = synthetic_batch(cfg.batch, cfg.horizon, cfg.state_dim, cfg.action_dim, cfg.seed.wrapping_add(1));
    let perm = permute_batch(cfg.batch, &mut rng)?;
    let coeffs = LossCoefficients::default();

    let reference = total_model_loss(&models, &batch, &perm, &coeffs, 1)?;
    let time = |f: &mut dyn FnMut() -> Result<()>| -> Result<(f64, f64)> {
        f()?;
        let mut ts = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let t = Instant::now();
            f()?;
            ts.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(stats(&ts))
    };

    let (seq_mean, seq_std) = time(&mut || sequential_rollout_loss(&models, &batch, &coeffs).map(|_| ()))?;
    let mut par = Vec::new();
    for &w in &cfg.workers {
        let out = total_model_loss(&models, &batch, &perm, &coeffs, w)?;
        let diff = output_rel_diff(&reference, &out);
        let (m, s) = time(&mut || total_model_loss(&models, &batch, &perm, &coeffs, w).map(|_| ()))?;
        par.push((w, m, s, diff));
    }
    let w1_mean = match par.iter().find(|p| p.0 == 1) {
        Some(p) => p.1,
        None => time(&mut || total_model_loss(&models, &batch, &perm, &coeffs, 1).map(|_| ()))?.0,
    };
    let mut rows = vec![TimingRow {
        variant: "sequential".into(),
        workers: 1,
        mean_ms: seq_mean,
        std_ms: seq_std,
        speedup_vs_w1: w1_mean / seq_mean,
        speedup_vs_sequential: 1.0,
        max_rel_diff: 0.0,
    }];
    for (w, m, s, diff) in par {
        rows.push(TimingRow {
            variant: "parallel".into(),
            workers: w,
            mean_ms: m,
            std_ms: s,
            speedup_vs_w1: if w == 1 { 1.0 } else { w1_mean / m },
            speedup_vs_sequential: seq_mean / m,
            max_rel_diff: diff,
        });
    }
    let available_cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    Ok(LossBenchReport { rows, available_cores })
}
