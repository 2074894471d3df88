//! Outer training loop: collect an episode with the planner, store it,
//! run one gradient update per collected step, evaluate and checkpoint.

mod replay;


pub use replay::{ReplayBuffer, Transition};

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, RunConfig};
use crate::envs::{make_env, Env};
use crate::error::{Error, Result};
use crate::losses::{permute_batch, policy_loss, total_model_loss, total_model_loss_value, LossBreakdown, LossCoefficients, SegmentBatch};
use crate::models::{ModelConfig, ModelSet};
use crate::nncore::{clip_grad_norm, Checkpoint, DenseArray};
use crate::planner::{plan, PlanConfig, PlanState};
use crate::{rng_from_seed, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total environment steps.
    pub env_steps: u64,
    /// Uniform-random steps before planning and updates start.
    pub seed_steps: u64,
    pub batch_size: usize,
    /// Loss horizon `H`; segments hold `H + 1` transitions.
    pub horizon: usize,
    /// Gradient updates per episode; 0 means one per env step collected.
    pub updates_per_episode: usize,
    pub lr: f64,
    pub policy_lr: f64,
    /// Target EMA coefficient.
    pub zeta: f64,
    /// Apply the target EMA every this many updates.
    pub target_every: u64,
    pub grad_clip: f64,
    /// Evaluate every this many env steps (0: only at the end).
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Checkpoint every this many env steps (0: only at the end).
    pub checkpoint_every: u64,
    pub buffer_capacity: usize,
    /// Threads for the per-step loss.
    pub workers: usize,
    /// Stop once an evaluation mean reaches this return.
    pub stop_at_return: Option<f64>,
    /// Every this many updates, recompute the bisimulation term under the
    /// identity permutation (must be exactly zero). 0 disables.
    pub identity_check_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env_steps: 30_000,
            seed_steps: 5_000,
            batch_size: 512,
            horizon: 5,
            updates_per_episode: 0,
            lr: 1e-3,
            policy_lr: 1e-3,
            zeta: 0.99,
            target_every: 2,
            grad_clip: 10.0,
            eval_every: 5_000,
            eval_episodes: 10,
            checkpoint_every: 10_000,
            buffer_capacity: 1_000_000,
            workers: 1,
            stop_at_return: None,
            identity_check_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: format!("train.{key}"), msg: msg.into() });
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "bisimulation pairs need at least 2 rows");
        }
        if !(self.lr > 0.0) || !(self.policy_lr > 0.0) {
            return bad("lr", "learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.zeta) || self.target_every == 0 {
            return bad("zeta", "need 0 <= zeta < 1 and target_every >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes", "must be positive");
        }
        if self.workers == 0 {
            return bad("workers", "must be positive");
        }
        if self.buffer_capacity <= self.horizon {
            return bad("buffer_capacity", "must exceed the horizon");
        }
        Ok(())
    }
}

/// How actions are chosen while collecting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CollectMode {
    /// Uniform in the action bounds.
    SeedRandom,
    /// MPPI with Gaussian noise of this std on the executed action.
    Plan { explore_std: f64 },
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub ret: f64,
    pub plan_calls: u64,
    pub fallbacks: u64,
}

fn row(v: &[f64]) -> DenseArray {
    DenseArray::from_raw(vec![1, v.len()], v.to_vec())
}

/// Run one episode. `env_step` is the global step at the episode start and
/// drives the planner schedules.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode(
    env: &mut dyn Env,
    models: &ModelSet,
    plan_cfg: &PlanConfig,
    state: &mut PlanState,
    mode: CollectMode,
    env_step: u64,
    episode: u64,
    rng: &mut Rng,
) -> Result<Episode> {
    let spec = env.spec().clone();
    let mut obs = env.reset();
    state.reset(plan_cfg, &spec.action_low, &spec.action_high);
    let calls_before = state.plan_calls;
    let mut transitions = Vec::with_capacity(spec.episode_length);
    let (mut ret, mut fallbacks) = (0.0, 0);
    for step in 0.. {
        let action: Vec<f64> = match mode {
            CollectMode::SeedRandom => spec.action_low.iter().zip(&spec.action_high).map(|(l, h)| rng.random_range(*l..=*h)).collect(),
            CollectMode::Plan { explore_std } => {
                let z = models.encode_array(&row(&obs))?;
                let out = plan(models, &z, plan_cfg, state, env_step + step as u64, explore_std, rng)?;
                fallbacks += u64::from(out.fallback);
                out.action
            }
        };
        let out = env.step(&action)?;
        ret += out.reward;
        transitions.push(Transition { obs, action, reward: out.reward, next_obs: out.obs.clone(), episode, step });
        obs = out.obs;
        if out.done {
            break;
        }
    }
    Ok(Episode { transitions, ret, plan_calls: state.plan_calls - calls_before, fallbacks })
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub policy_loss: f64,
    /// The model update was skipped because the loss or gradient was not
    /// finite.
    pub skipped: bool,
}

/// One Adam step on θ from the model objective, then one on ψ from the
/// policy objective with θ fixed, then the target EMA for `update_step`.
pub fn train_step(
    models: &mut ModelSet,
    batch: &SegmentBatch,
    coeffs: &LossCoefficients,
    tc: &TrainConfig,
    update_step: u64,
    rng: &mut Rng,
) -> Result<StepReport> {
    let perm = permute_batch(batch.batch_size(), rng)?;
    let mut out = match total_model_loss(models, batch, &perm, coeffs, tc.workers) {
        Ok(o) => o,
        Err(Error::NonFinite { context }) => {
            log::warn!("update {update_step}: non-finite {context}, step skipped");
            return Ok(StepReport { breakdown: LossBreakdown::default(), policy_loss: f64::NAN, skipped: true });
        }
        Err(e) => return Err(e),
    };
    let grads_finite = out.grads.values().all(|g| g.is_finite());
    if !out.breakdown.total.is_finite() || !grads_finite {
        log::warn!("update {update_step}: non-finite model loss, step skipped");
        return Ok(StepReport { breakdown: out.breakdown, policy_loss: f64::NAN, skipped: true });
    }
    out.breakdown.grad_norm = clip_grad_norm(&mut out.grads, tc.grad_clip);
    models.theta.adam_step(&out.grads, tc.lr)?;

    let mut p = policy_loss(models, batch, coeffs)?;
    let mut skipped = false;
    if p.loss.is_finite() && p.grads.values().all(|g| g.is_finite()) {
        clip_grad_norm(&mut p.grads, tc.grad_clip);
        models.psi.adam_step(&p.grads, tc.policy_lr)?;
    } else {
        log::warn!("update {update_step}: non-finite policy loss, policy step skipped");
        skipped = true;
    }
    models.update_targets(tc.zeta, tc.target_every, update_step)?;
    Ok(StepReport { breakdown: out.breakdown, policy_loss: p.loss, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Noise-free planner episodes on fresh environments seeded `seed + i`.
pub fn evaluate(models: &ModelSet, plan_cfg: &PlanConfig, env_cfg: &EnvConfig, n_episodes: usize, seed: u64, env_step: u64) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Contract("need at least one evaluation episode".into()));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes as u64 {
        let mut env = make_env(&env_cfg.name, &env_cfg.distractors, seed.wrapping_add(i))?;
        let spec = env.spec().clone();
        let mut state = PlanState::new(plan_cfg, &spec.action_low, &spec.action_high);
        let mut rng = rng_from_seed(seed.wrapping_add(i) ^ 0xE7A1);
        let ep = collect_episode(env.as_mut(), models, plan_cfg, &mut state, CollectMode::Plan { explore_std: 0.0 }, env_step, i, &mut rng)?;
        returns.push(ep.ret);
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / returns.len() as f64;
    Ok(EvalReport { returns, mean, std: var.sqrt() })
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// `update`, `episode` or `eval`.
    pub kind: String,
    pub env_step: u64,
    pub step: u64,
    pub total: Option<f64>,
    pub reward_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub consistency_loss: Option<f64>,
    pub bisim_loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub q_mean: Option<f64>,
    pub policy_loss: Option<f64>,
    pub identity_bisim: Option<f64>,
    pub episode_return: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub skipped_steps: u64,
    pub plan_fallbacks: u64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub skipped_steps: u64,
    pub evals: Vec<(u64, f64, f64)>,
    pub final_eval: Option<EvalReport>,
    /// Largest identity-permutation bisimulation term seen (0 when the
    /// check is off or always exact).
    pub identity_bisim_max: f64,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub seed: u64,
    pub env: Box<dyn Env>,
    pub models: ModelSet,
    pub buffer: ReplayBuffer,
    pub rng: Rng,
    pub plan_state: PlanState,
    pub env_step: u64,
    pub updates: u64,
    pub episodes: u64,
    pub skipped: u64,
    pub fallbacks: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(&cfg.env.name, &cfg.env.distractors, seed)?;
        let spec = env.spec().clone();
        let mcfg = ModelConfig {
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            latent_dim: cfg.model.latent_dim,
            hidden_dim: cfg.model.hidden_dim,
            action_low: spec.action_low.clone(),
            action_high: spec.action_high.clone(),
        };
        let models = ModelSet::new(mcfg, &mut rng_from_seed(seed))?;
        let plan_state = PlanState::new(&cfg.planner, &spec.action_low, &spec.action_high);
        Ok(Trainer {
            buffer: ReplayBuffer::new(cfg.train.buffer_capacity),
            rng: rng_from_seed(seed ^ 0x7EA1_2B0C),
            cfg,
            seed,
            env,
            models,
            plan_state,
            env_step: 0,
            updates: 0,
            episodes: 0,
            skipped: 0,
            fallbacks: 0,
        })
    }

    fn eval_seed(&self) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(77_777)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        self.models.write_checkpoint(&mut ck)?;
        ck.counters.insert("env_step".into(), self.env_step);
        ck.counters.insert("updates".into(), self.updates);
        ck.counters.insert("episodes".into(), self.episodes);
        ck.counters.insert("seed".into(), self.seed);
        ck.rng = Some(self.rng.clone());
        ck.meta.insert("run_config".into(), self.cfg.to_toml()?);
        Ok(ck)
    }

    /// Train to the configured budget, writing `metrics.csv`, checkpoints
    /// and `manifest.json` into `out_dir`.
    pub fn run(&mut self, out_dir: &Path, revision: &str) -> Result<RunSummary> {
        fs::create_dir_all(out_dir)?;
        write_manifest(out_dir, &self.cfg, self.seed, revision)?;
        let mut metrics = csv::Writer::from_path(out_dir.join("metrics.csv"))?;
        let tc = self.cfg.train.clone();
        let coeffs = self.cfg.loss.clone();
        let mut evals = Vec::new();
        let mut final_eval = None;
        let mut identity_max: f64 = 0.0;
        let mut next_eval = if tc.eval_every > 0 { tc.eval_every } else { u64::MAX };
        let mut next_ckpt = if tc.checkpoint_every > 0 { tc.checkpoint_every } else { u64::MAX };
        let mut stopped_early = false;

        while self.env_step < tc.env_steps {
            let mode = if self.env_step < tc.seed_steps {
                CollectMode::SeedRandom
            } else {
                CollectMode::Plan { explore_std: self.cfg.planner.min_std_at(self.env_step) }
            };
            let ep = collect_episode(self.env.as_mut(), &self.models, &self.cfg.planner, &mut self.plan_state, mode, self.env_step, self.episodes, &mut self.rng)?;
            let collected = ep.transitions.len() as u64;
            for t in ep.transitions {
                self.buffer.push(t)?;
            }
            self.env_step += collected;
            self.episodes += 1;
            self.fallbacks += ep.fallbacks;
            metrics.serialize(MetricsRow {
                kind: "episode".into(),
                env_step: self.env_step,
                step: self.updates,
                episode_return: Some(ep.ret),
                skipped_steps: self.skipped,
                plan_fallbacks: self.fallbacks,
                ..Default::default()
            })?;

            if self.env_step >= tc.seed_steps {
                let k = if tc.updates_per_episode > 0 { tc.updates_per_episode as u64 } else { collected };
                for _ in 0..k {
                    let batch = self.buffer.sample_segments(tc.batch_size, tc.horizon, &mut self.rng)?;
                    self.updates += 1;
                    let rep = train_step(&mut self.models, &batch, &coeffs, &tc, self.updates, &mut self.rng)?;
                    self.skipped += u64::from(rep.skipped);
                    let identity = if tc.identity_check_every > 0 && self.updates % tc.identity_check_every == 0 {
                        let ident: Vec<usize> = (0..batch.batch_size()).collect();
                        let b = total_model_loss_value(&self.models, &batch, &ident, &coeffs)?;
                        let worst = b.per_step.iter().map(|s| s.bisim.abs()).fold(0.0, f64::max);
                        identity_max = identity_max.max(worst);
                        Some(worst)
                    } else {
                        None
                    };
                    let b = &rep.breakdown;
                    let finite = |v: f64| if rep.skipped && !v.is_finite() { None } else { Some(v) };
                    metrics.serialize(MetricsRow {
                        kind: "update".into(),
                        env_step: self.env_step,
                        step: self.updates,
                        total: finite(b.total),
                        reward_loss: finite(b.totals.reward),
                        value_loss: finite(b.totals.value),
                        consistency_loss: finite(b.totals.consistency),
                        bisim_loss: finite(b.totals.bisim),
                        grad_norm: if rep.skipped { None } else { Some(b.grad_norm) },
                        q_mean: finite(b.q_mean),
                        policy_loss: finite(rep.policy_loss),
                        identity_bisim: identity,
                        skipped_steps: self.skipped,
                        plan_fallbacks: self.fallbacks,
                        ..Default::default()
                    })?;
                }
            }

            let done = self.env_step >= tc.env_steps;
            if self.env_step >= next_eval || done {
                while next_eval <= self.env_step {
                    next_eval = next_eval.saturating_add(tc.eval_every);
                }
                let ev = evaluate(&self.models, &self.cfg.planner, &self.cfg.env, tc.eval_episodes, self.eval_seed(), self.env_step)?;
                log::info!("seed {} env step {}: eval {:.1} ± {:.1}", self.seed, self.env_step, ev.mean, ev.std);
                metrics.serialize(MetricsRow {
                    kind: "eval".into(),
                    env_step: self.env_step,
                    step: self.updates,
                    eval_return_mean: Some(ev.mean),
                    eval_return_std: Some(ev.std),
                    skipped_steps: self.skipped,
                    plan_fallbacks: self.fallbacks,
                    ..Default::default()
                })?;
                evals.push((self.env_step, ev.mean, ev.std));
                let hit = tc.stop_at_return.is_some_and(|t| ev.mean >= t);
                final_eval = Some(ev);
                if hit && !done {
                    stopped_early = true;
                }
            }
            metrics.flush()?;
            if self.env_step >= next_ckpt {
                while next_ckpt <= self.env_step {
                    next_ckpt = next_ckpt.saturating_add(tc.checkpoint_every);
                }
                self.checkpoint()?.save(&out_dir.join(format!("ckpt_{:08}.json", self.env_step)))?;
            }
            if stopped_early {
                break;
            }
        }
        metrics.flush()?;
        self.checkpoint()?.save(&out_dir.join("final.json"))?;
        Ok(RunSummary {
            seed: self.seed,
            env_steps: self.env_step,
            updates: self.updates,
            episodes: self.episodes,
            skipped_steps: self.skipped,
            evals,
            final_eval,
            identity_bisim_max: identity_max,
            stopped_early,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub revision: String,
    pub seed: u64,
    pub crate_version: String,
    /// Fully resolved configuration, TOML.
    pub config: String,
}

pub fn write_manifest(dir: &Path, cfg: &RunConfig, seed: u64, revision: &str) -> Result<PathBuf> {
    let m = Manifest { revision: revision.into(), seed, crate_version: env!("CARGO_PKG_VERSION").into(), config: cfg.to_toml()? };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    Ok(path)
}

/// Models and run configuration from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(ModelSet, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let models = ModelSet::from_checkpoint(&ck)?;
    let text = ck.meta.get("run_config").ok_or_else(|| Error::Contract("checkpoint lacks `run_config`".into()))?;
    Ok((models, RunConfig::from_toml(text)?))
}
