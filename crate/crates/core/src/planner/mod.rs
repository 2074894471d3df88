//! MPPI action selection in latent space.
//!
//! Candidate action sequences are scored by rolling them through the
//! learned latent dynamics, summing discounted predicted rewards and adding
//! a discounted terminal value. The sampling Gaussian is refit to the
//! exponentially weighted elites for a fixed number of iterations.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::models::{ModelSet, QMode, Src};
use crate::nncore::DenseArray;
use crate::Rng;

/// What the planner needs from a learned model. Every method acts on a
/// batch of rows.
pub trait LatentModel {
    fn latent_dim(&self) -> usize;
    fn action_low(&self) -> &[f64];
    fn action_high(&self) -> &[f64];
    fn action_dim(&self) -> usize {
        self.action_low().len()
    }
    /// Next latent `[N × Z]` and reward `[N × 1]`.
    fn step(&self, z: &DenseArray, a: &DenseArray) -> Result<(DenseArray, DenseArray)>;
    /// Deterministic prior policy `[N × A]`.
    fn policy(&self, z: &DenseArray) -> Result<DenseArray>;
    /// Terminal value `Q(z, π(z))`, `[N × 1]`.
    fn value(&self, z: &DenseArray) -> Result<DenseArray>;
}

impl LatentModel for ModelSet {
    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn action_low(&self) -> &[f64] {
        &self.cfg.action_low
    }

    fn action_high(&self) -> &[f64] {
        &self.cfg.action_high
    }

    fn step(&self, z: &DenseArray, a: &DenseArray) -> Result<(DenseArray, DenseArray)> {
        self.step_array(z, a)
    }

    fn policy(&self, z: &DenseArray) -> Result<DenseArray> {
        self.policy_mean_array(z)
    }

    fn value(&self, z: &DenseArray) -> Result<DenseArray> {
        let a = self.policy_mean_array(z)?;
        self.q_value_with(z, &a, QMode::Min, Src::Online)
    }
}

/// Linear interpolation from `start` to `end` over `steps`, constant after.
pub fn linear_schedule(start: f64, end: f64, steps: u64, t: u64) -> f64 {
    if steps == 0 {
        return end;
    }
    let frac = (t as f64 / steps as f64).min(1.0);
    start + (end - start) * frac
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    /// Final planning horizon.
    pub horizon: usize,
    /// Horizon at env step 0; grows linearly to `horizon`.
    pub horizon_start: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub policy_fraction: f64,
    pub init_mean: f64,
    pub init_std: f64,
    /// Lower bound on σ, annealed from `min_std_start` to `min_std_end`.
    pub min_std_start: f64,
    pub min_std_end: f64,
    /// Env steps over which both schedules anneal.
    pub schedule_steps: u64,
    /// `μ ← m·μ_old + (1 − m)·μ_new` between iterations.
    pub momentum: f64,
    /// Number of the previous iteration's elites re-entered into the next
    /// candidate pool (0 disables carry-over).
    pub keep_elites: usize,
    pub gamma: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 5,
            horizon_start: 1,
            population: 512,
            elites: 64,
            iterations: 6,
            temperature: 0.5,
            policy_fraction: 0.05,
            init_mean: 0.0,
            init_std: 2.0,
            min_std_start: 0.5,
            min_std_end: 0.05,
            schedule_steps: 25_000,
            momentum: 0.0,
            keep_elites: 0,
            gamma: 0.99,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: format!("planner.{key}"), msg: msg.into() });
        if self.horizon == 0 || self.horizon_start == 0 || self.horizon_start > self.horizon {
            return bad("horizon", "need 1 <= horizon_start <= horizon");
        }
        if self.population == 0 || self.elites == 0 || self.elites > self.population {
            return bad("elites", "need 1 <= elites <= population");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.policy_fraction) {
            return bad("policy_fraction", "must lie in [0, 1]");
        }
        if !(self.init_std > 0.0) || !(self.min_std_start >= 0.0) || !(self.min_std_end >= 0.0) {
            return bad("init_std", "standard deviations must be non-negative (init_std positive)");
        }
        if self.keep_elites > self.elites {
            return bad("keep_elites", "cannot exceed elites");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        Ok(())
    }

    /// Planning horizon at env step `t` (rounded linear interpolation).
    pub fn horizon_at(&self, t: u64) -> usize {
        linear_schedule(self.horizon_start as f64, self.horizon as f64, self.schedule_steps, t).round() as usize
    }

    /// σ floor at env step `t`.
    pub fn min_std_at(&self, t: u64) -> f64 {
        linear_schedule(self.min_std_start, self.min_std_end, self.schedule_steps, t)
    }

    fn policy_count(&self) -> usize {
        (self.policy_fraction * self.population as f64).floor() as usize
    }
}

/// Sampling distribution carried between env steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanState {
    /// `[horizon × action_dim]`.
    pub mu: DenseArray,
    pub sigma: DenseArray,
    /// Whether `mu` holds a previous solution to warm-start from.
    pub warm: bool,
    pub plan_calls: u64,
}

impl PlanState {
    pub fn new(cfg: &PlanConfig, low: &[f64], high: &[f64]) -> Self {
        let a = low.len();
        let mut mu = DenseArray::full(&[cfg.horizon, a], cfg.init_mean);
        for (k, v) in mu.data_mut().iter_mut().enumerate() {
            *v = v.clamp(low[k % a], high[k % a]);
        }
        PlanState { mu, sigma: DenseArray::full(&[cfg.horizon, a], cfg.init_std), warm: false, plan_calls: 0 }
    }

    /// Forget the warm start (call at episode boundaries).
    pub fn reset(&mut self, cfg: &PlanConfig, low: &[f64], high: &[f64]) {
        let calls = self.plan_calls;
        *self = PlanState::new(cfg, low, high);
        self.plan_calls = calls;
    }

    /// Shift μ left by one step, pad with zeros, reset σ to `init_std`.
    fn warm_start(&mut self, cfg: &PlanConfig, low: &[f64], high: &[f64]) {
        let a = self.mu.cols();
        if self.warm {
            let d = self.mu.data_mut();
            d.copy_within(a.., 0);
            let n = d.len();
            for (j, v) in d[n - a..].iter_mut().enumerate() {
                *v = 0.0f64.clamp(low[j], high[j]);
            }
        }
        for v in self.sigma.data_mut() {
            *v = cfg.init_std;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutput {
    /// First action of the final mean plus optional exploration noise.
    pub action: Vec<f64>,
    /// Final mean over the scheduled horizon, `[h × action_dim]`.
    pub mean: DenseArray,
    pub horizon: usize,
    /// Best elite score after each iteration.
    pub best_scores: Vec<f64>,
    /// Max minus min elite score at the last iteration.
    pub elite_spread: f64,
    pub sigma_mean: f64,
    /// The planner fell back to the prior policy.
    pub fallback: bool,
}

/// Discounted return of `n` candidate sequences from a single latent state.
/// `actions[h]` is the `[n × A]` block of step-`h` actions.
pub fn rollout_scores<M: LatentModel + ?Sized>(
    model: &M,
    z0: &DenseArray,
    actions: &[DenseArray],
    n: usize,
    gamma: f64,
) -> Result<Vec<f64>> {
    if z0.rows() != 1 || z0.cols() != model.latent_dim() {
        return Err(shape_err("rollout", format!("start latent {:?}", z0.shape())));
    }
    let mut z = z0.select_rows(&vec![0; n]);
    let mut score = vec![0.0; n];
    let mut disc = 1.0;
    for a in actions {
        if a.rows() != n || a.cols() != model.action_dim() {
            return Err(shape_err("rollout", format!("action block {:?} for {n} candidates", a.shape())));
        }
        let (next, r) = model.step(&z, a)?;
        for (s, rv) in score.iter_mut().zip(r.data()) {
            *s += disc * rv;
        }
        disc *= gamma;
        z = next;
    }
    let v = model.value(&z)?;
    for (s, vv) in score.iter_mut().zip(v.data()) {
        *s += disc * vv;
    }
    Ok(score)
}

/// Score of one sequence given as `[h × A]`.
pub fn rollout_score<M: LatentModel + ?Sized>(model: &M, z0: &DenseArray, seq: &DenseArray, gamma: f64) -> Result<f64> {
    let blocks: Vec<DenseArray> = (0..seq.rows()).map(|h| seq.select_rows(&[h])).collect();
    Ok(rollout_scores(model, z0, &blocks, 1, gamma)?[0])
}

/// Exponentially weighted refit of the sampling Gaussian to elites.
/// `elites[i]` is a flattened `[h × A]` sequence. Returns `(μ, σ)` with σ
/// floored at `min_std`.
pub fn refit(elites: &[Vec<f64>], scores: &[f64], temperature: f64, min_std: f64) -> (Vec<f64>, Vec<f64>) {
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| ((s - best) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let d = elites[0].len();
    let mut mu = vec![0.0; d];
    for (e, wi) in elites.iter().zip(&w) {
        for (m, x) in mu.iter_mut().zip(e) {
            *m += wi * x;
        }
    }
    for m in &mut mu {
        *m /= total;
    }
    let mut var = vec![0.0; d];
    for (e, wi) in elites.iter().zip(&w) {
        for ((v, x), m) in var.iter_mut().zip(e).zip(&mu) {
            *v += wi * (x - m) * (x - m);
        }
    }
    let sigma = var.iter().map(|v| (v / total).sqrt().max(min_std)).collect();
    (mu, sigma)
}

/// Plan one action from latent `z` (`[1 × Z]`). `env_step` drives the
/// horizon and σ-floor schedules; `explore_std` adds Gaussian noise to the
/// returned action.
pub fn plan<M: LatentModel + ?Sized>(
    model: &M,
    z: &DenseArray,
    cfg: &PlanConfig,
    state: &mut PlanState,
    env_step: u64,
    explore_std: f64,
    rng: &mut Rng,
) -> Result<PlanOutput> {
    cfg.validate()?;
    if !z.is_finite() {
        return Err(Error::NonFinite { context: "planner start latent".into() });
    }
    let (low, high) = (model.action_low().to_vec(), model.action_high().to_vec());
    let ad = low.len();
    if state.mu.shape() != [cfg.horizon, ad] {
        return Err(shape_err("plan", format!("state μ {:?} for horizon {}", state.mu.shape(), cfg.horizon)));
    }
    state.plan_calls += 1;
    state.warm_start(cfg, &low, &high);
    state.warm = true;

    let h = cfg.horizon_at(env_step).clamp(1, cfg.horizon);
    let min_std = cfg.min_std_at(env_step);
    let clip = |v: f64, j: usize| v.clamp(low[j], high[j]);

    // Prior-policy candidates, sampled once per call.
    let n_pi = cfg.policy_count();
    let mut pi_blocks = Vec::with_capacity(h);
    if n_pi > 0 {
        let mut zp = z.select_rows(&vec![0; n_pi]);
        for _ in 0..h {
            let mut a = model.policy(&zp)?;
            for (k, v) in a.data_mut().iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(rng);
                *v = clip(*v + min_std * eps, k % ad);
            }
            let (next, _) = model.step(&zp, &a)?;
            pi_blocks.push(a);
            zp = next;
        }
    }
    let pi_scores = if n_pi > 0 { rollout_scores(model, z, &pi_blocks, n_pi, cfg.gamma)? } else { Vec::new() };

    let n_gauss = cfg.population - n_pi;
    let mut mu: Vec<f64> = state.mu.data()[..h * ad].to_vec();
    let mut sigma: Vec<f64> = state.sigma.data()[..h * ad].to_vec();
    let mut best_scores = Vec::with_capacity(cfg.iterations);
    let mut elite_spread = 0.0;
    let mut fallback = false;
    let mut carried: Vec<(Vec<f64>, f64)> = Vec::new();

    for _ in 0..cfg.iterations {
        // Gaussian candidates in step-major blocks of `[n_gauss × A]`.
        let mut blocks = Vec::with_capacity(h);
        for t in 0..h {
            let mut b = Vec::with_capacity(n_gauss * ad);
            for _ in 0..n_gauss {
                for j in 0..ad {
                    let eps: f64 = StandardNormal.sample(rng);
                    let k = t * ad + j;
                    b.push(clip(mu[k] + sigma[k] * eps, j));
                }
            }
            blocks.push(DenseArray::new(vec![n_gauss, ad], b)?);
        }
        let mut scores = if n_gauss > 0 { rollout_scores(model, z, &blocks, n_gauss, cfg.gamma)? } else { Vec::new() };
        scores.extend_from_slice(&pi_scores);
        scores.extend(carried.iter().map(|c| c.1));
        let sequence = |i: usize| -> Vec<f64> {
            if i < n_gauss {
                (0..h).flat_map(|t| blocks[t].row(i).to_vec()).collect()
            } else if i < cfg.population {
                (0..h).flat_map(|t| pi_blocks[t].row(i - n_gauss).to_vec()).collect()
            } else {
                carried[i - cfg.population].0.clone()
            }
        };

        let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
        if order.is_empty() {
            fallback = true;
            break;
        }
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(cfg.elites);
        let elite_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let elites: Vec<Vec<f64>> = order.iter().map(|&i| sequence(i)).collect();
        carried = elites.iter().cloned().zip(elite_scores.iter().cloned()).take(cfg.keep_elites).collect();
        best_scores.push(elite_scores[0]);
        elite_spread = elite_scores[0] - elite_scores[elite_scores.len() - 1];
        let (new_mu, new_sigma) = refit(&elites, &elite_scores, cfg.temperature, min_std);
        for (m, nm) in mu.iter_mut().zip(&new_mu) {
            *m = cfg.momentum * *m + (1.0 - cfg.momentum) * nm;
        }
        sigma = new_sigma;
    }

    if fallback {
        log::warn!("all planner scores non-finite at env step {env_step}; using the prior policy");
        let a = model.policy(z)?;
        let action: Vec<f64> = a.row(0).iter().enumerate().map(|(j, v)| clip(*v, j)).collect();
        return Ok(PlanOutput {
            action,
            mean: DenseArray::new(vec![h, ad], mu)?,
            horizon: h,
            best_scores,
            elite_spread: f64::NAN,
            sigma_mean: f64::NAN,
            fallback: true,
        });
    }

    for (k, m) in mu.iter_mut().enumerate() {
        *m = clip(*m, k % ad);
    }
    state.mu.data_mut()[..h * ad].copy_from_slice(&mu);
    state.sigma.data_mut()[..h * ad].copy_from_slice(&sigma);

    let mut action = mu[..ad].to_vec();
    if explore_std > 0.0 {
        for (j, v) in action.iter_mut().enumerate() {
            let eps: f64 = StandardNormal.sample(rng);
            *v = clip(*v + explore_std * eps, j);
        }
    }
    let sigma_mean = sigma.iter().sum::<f64>() / sigma.len() as f64;
    Ok(PlanOutput { action, mean: DenseArray::new(vec![h, ad], mu)?, horizon: h, best_scores, elite_spread, sigma_mean, fallback })
}
