//! Per-timestep model objective (reward, value, latent consistency and
//! bisimulation terms), its λ-discounted sum over the horizon, and the
//! policy objective.
//!
//! Every step `k` only needs the encodings of `s_k` and `s_{k+1}`, so the
//! horizon can be split across workers. Step values are reduced in `k`
//! order and gradients in worker order, which keeps results reproducible.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::models::{ModelSet, QMode, Src};
use crate::nncore::{DenseArray, Tape, Var};
use crate::Rng;

pub mod timing;

/// Distance used on the target-dynamics branch of the bisimulation target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynDistance {
    /// Squared Euclidean distance.
    SqL2,
    /// Euclidean distance.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub bisim_dyn_distance: DynDistance,
    /// Head combination used inside the policy objective.
    pub policy_q_mode: QMode,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        LossCoefficients {
            c1: 0.5,
            c2: 0.1,
            c3: 0.5,
            c4: 0.01,
            lambda: 0.5,
            gamma: 0.99,
            bisim_dyn_distance: DynDistance::SqL2,
            policy_q_mode: QMode::Avg,
        }
    }
}

/// Per-environment bisimulation weights `c4` used for the DM Control tasks.
pub fn c4_for_task(task: &str) -> Option<f64> {
    let v = match task.to_ascii_lowercase().as_str() {
        "acrobot" => 1e-4,
        "cartpole" => 0.5,
        "cheetah" => 1e-3,
        "cup" => 0.5,
        "finger" => 1e-3,
        "fish" => 1e-3,
        "hopper" => 0.1,
        "humanoid" => 1e-3,
        "pendulum" => 0.01,
        "quadruped" => 0.1,
        "reacher" => 0.01,
        "walker" => 1e-3,
        "dog" => 1e-8,
        _ => return None,
    };
    Some(v)
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: format!("loss.{key}"), msg: msg.into() });
        for (k, v) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3), ("c4", self.c4)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, "must be a finite non-negative number");
            }
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda", "must lie in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        Ok(())
    }
}

/// `H + 1` consecutive transitions for each of `B` batch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    /// `H + 2` observation slices, each `[B × state_dim]`.
    pub obs: Vec<DenseArray>,
    /// `H + 1` action slices, each `[B × action_dim]`.
    pub actions: Vec<DenseArray>,
    /// `H + 1` reward slices, each `[B × 1]`.
    pub rewards: Vec<DenseArray>,
}

impl SegmentBatch {
    pub fn horizon(&self) -> usize {
        self.actions.len() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.actions[0].rows()
    }

    pub fn validate(&self) -> Result<()> {
        let h1 = self.actions.len();
        if h1 == 0 || self.rewards.len() != h1 || self.obs.len() != h1 + 1 {
            return Err(shape_err(
                "SegmentBatch",
                format!("{} obs, {} actions, {} rewards", self.obs.len(), h1, self.rewards.len()),
            ));
        }
        let b = self.batch_size();
        let rows_ok = self.obs.iter().chain(&self.actions).chain(&self.rewards).all(|a| a.rows() == b);
        if !rows_ok || self.rewards.iter().any(|r| r.cols() != 1) {
            return Err(shape_err("SegmentBatch", "inconsistent batch rows or reward width"));
        }
        Ok(())
    }
}

/// Batch-mean values of the four terms at one step (before coefficients).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub reward: f64,
    pub value: f64,
    pub consistency: f64,
    pub bisim: f64,
}

impl StepTerms {
    pub fn weighted(&self, c: &LossCoefficients) -> f64 {
        c.c1 * self.reward + c.c2 * self.value + c.c3 * self.consistency + c.c4 * self.bisim
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_step: Vec<StepTerms>,
    /// `Σ_k λ^k · term_k` for each term.
    pub totals: StepTerms,
    /// `Σ_k λ^k · (c1·A_k + c2·B_k + c3·C_k + c4·D_k)`.
    pub total: f64,
    /// Global gradient norm before clipping (0 until a trainer fills it).
    pub grad_norm: f64,
    /// Mean online Q (average of heads) over the segment.
    pub q_mean: f64,
}

impl LossBreakdown {
    fn from_steps(per_step: Vec<StepTerms>, q_means: &[f64], c: &LossCoefficients) -> Self {
        let mut totals = StepTerms::default();
        let mut total = 0.0;
        let mut w = 1.0;
        for t in &per_step {
            totals.reward += w * t.reward;
            totals.value += w * t.value;
            totals.consistency += w * t.consistency;
            totals.bisim += w * t.bisim;
            total += w * t.weighted(c);
            w *= c.lambda;
        }
        let q_mean = q_means.iter().sum::<f64>() / q_means.len().max(1) as f64;
        LossBreakdown { per_step, totals, total, grad_norm: 0.0, q_mean }
    }
}

/// Uniform random permutation of `0..batch_size`, fixed points allowed.
pub fn permute_batch(batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::Contract(format!(
            "bisimulation pairing needs a batch of at least 2 rows, got {batch_size}"
        )));
    }
    let mut idx: Vec<usize> = (0..batch_size).collect();
    idx.shuffle(rng);
    Ok(idx)
}

fn check_finite(v: f64, term: &str, k: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context: format!("{term} at step {k}") })
    }
}

fn check_perm(perm: &[usize], b: usize) -> Result<()> {
    let mut seen = vec![false; b];
    if perm.len() != b || perm.iter().any(|&i| i >= b || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Contract(format!("permutation is not a bijection on 0..{b}")));
    }
    Ok(())
}

/// Gradient-stopped quantities of one step, computed before any
/// differentiable work.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTargets {
    /// `r_k + γ · min Q̄(z_{k+1}, π(z_{k+1}))`, `[B × 1]`.
    pub td: DenseArray,
    /// Target-encoder embedding `h̄(s_{k+1})`, `[B × Z]`.
    pub next_latent: DenseArray,
    /// Target dynamics on the stopped online latents `d̄(z_k, a_k)`, `[B × Z]`.
    pub dyn_target: DenseArray,
}

/// Stopped targets for step `k`.
pub fn step_targets(models: &ModelSet, batch: &SegmentBatch, k: usize, gamma: f64) -> Result<StepTargets> {
    if k > batch.horizon() {
        return Err(Error::Contract(format!("step {k} outside horizon {}", batch.horizon())));
    }
    let (s_k, s_next, a_k) = (&batch.obs[k], &batch.obs[k + 1], &batch.actions[k]);
    let z_next = models.encode_with(s_next, Src::Online)?;
    let a_next = models.policy_mean_array(&z_next)?;
    let q_next = models.q_value_with(&z_next, &a_next, QMode::Min, Src::Target)?;
    let td_data = batch.rewards[k].data().iter().zip(q_next.data()).map(|(r, q)| r + q * gamma).collect();
    let td = DenseArray::new(vec![q_next.rows(), 1], td_data)?;

    let next_latent = models.encode_with(s_next, Src::Target)?;
    let z_k = models.encode_with(s_k, Src::Online)?;
    let dyn_target = models.predict_next_with(&z_k, a_k, Src::Target)?;
    Ok(StepTargets { td, next_latent, dyn_target })
}

/// Stopped targets for every step of the segment.
pub fn segment_targets(models: &ModelSet, batch: &SegmentBatch, gamma: f64) -> Result<Vec<StepTargets>> {
    batch.validate()?;
    (0..=batch.horizon()).map(|k| step_targets(models, batch, k, gamma)).collect()
}

struct StepOut {
    /// Scalar node `L_k` (coefficients applied, no λ factor).
    loss: Var,
    terms: StepTerms,
    q_mean: f64,
}

/// Build the per-step loss `L_k` on `tape`. Only the online encoder,
/// reward, Q and dynamics parameters carry gradients; everything in
/// `targets` enters as a constant.
fn step_on_tape(
    tape: &mut Tape,
    models: &ModelSet,
    batch: &SegmentBatch,
    k: usize,
    perm: &[usize],
    targets: &StepTargets,
    c: &LossCoefficients,
) -> Result<StepOut> {
    if k > batch.horizon() {
        return Err(Error::Contract(format!("step {k} outside horizon {}", batch.horizon())));
    }
    let s_k = tape.constant(batch.obs[k].clone());
    let a_k = tape.constant(batch.actions[k].clone());
    let r_k = tape.constant(batch.rewards[k].clone());

    let z_k = models.encode(tape, s_k, Src::Train)?;

    // (A) reward
    let r_hat = models.predict_reward(tape, z_k, a_k, Src::Train)?;
    let dr = tape.sub(r_hat, r_k)?;
    let sq = tape.square(dr);
    let term_a = tape.mean(sq);

    // (B) twin Q heads against the TD target
    let td = tape.constant(targets.td.clone());
    let q1 = models.q_value(tape, z_k, a_k, QMode::Head1, Src::Train)?;
    let q2 = models.q_value(tape, z_k, a_k, QMode::Head2, Src::Train)?;
    let q_mean = 0.5 * (tape.value(q1).mean() + tape.value(q2).mean());
    let e1 = tape.sub(q1, td)?;
    let e1 = tape.square(e1);
    let e2 = tape.sub(q2, td)?;
    let e2 = tape.square(e2);
    let e = tape.add(e1, e2)?;
    let term_b = tape.mean(e);

    // (C) latent consistency against the target encoder
    let z_tgt = tape.constant(targets.next_latent.clone());
    let z_pred = models.predict_next(tape, z_k, a_k, Src::Train)?;
    let dz = tape.sub(z_pred, z_tgt)?;
    let dz = tape.square(dz);
    let dz = tape.row_sum(dz);
    let term_c = tape.mean(dz);

    // (D) bisimulation: ℓ1 latent distance vs |Δr| + γ · dist(z̄_{k+1}, ź̄_{k+1})
    let z_perm = tape.gather_rows(z_k, perm)?;
    let diff = tape.sub(z_k, z_perm)?;
    let diff = tape.abs(diff);
    let l1 = tape.row_sum(diff);
    let bisim_target = bisim_target(&batch.rewards[k], &targets.dyn_target, perm, c);
    let bisim_target = tape.constant(bisim_target);
    let gap = tape.sub(l1, bisim_target)?;
    let gap = tape.square(gap);
    let term_d = tape.mean(gap);

    let terms = StepTerms {
        reward: check_finite(tape.value(term_a).item(), "reward loss", k)?,
        value: check_finite(tape.value(term_b).item(), "value loss", k)?,
        consistency: check_finite(tape.value(term_c).item(), "consistency loss", k)?,
        bisim: check_finite(tape.value(term_d).item(), "bisimulation loss", k)?,
    };
    let parts = [(term_a, c.c1), (term_b, c.c2), (term_c, c.c3), (term_d, c.c4)];
    let mut loss = tape.scale(parts[0].0, parts[0].1);
    for (t, w) in &parts[1..] {
        let s = tape.scale(*t, *w);
        loss = tape.add(loss, s)?;
    }
    Ok(StepOut { loss, terms, q_mean })
}

/// `|r_i − r_{π(i)}| + γ · dist(z̄_i, z̄_{π(i)})` per row.
fn bisim_target(rewards: &DenseArray, dyn_target: &DenseArray, perm: &[usize], c: &LossCoefficients) -> DenseArray {
    let data = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let sq: f64 = dyn_target.row(i).iter().zip(dyn_target.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let dist = match c.bisim_dyn_distance {
                DynDistance::SqL2 => sq,
                DynDistance::L2 => sq.sqrt(),
            };
            (rewards.data()[i] - rewards.data()[j]).abs() + c.gamma * dist
        })
        .collect();
    DenseArray::from_raw(vec![perm.len(), 1], data)
}

/// Values of the four terms at step `k` (no gradients).
pub fn per_step_loss(
    models: &ModelSet,
    batch: &SegmentBatch,
    k: usize,
    perm: &[usize],
    coeffs: &LossCoefficients,
) -> Result<StepTerms> {
    batch.validate()?;
    check_perm(perm, batch.batch_size())?;
    let targets = step_targets(models, batch, k, coeffs.gamma)?;
    let mut tape = Tape::new();
    Ok(step_on_tape(&mut tape, models, batch, k, perm, &targets, coeffs)?.terms)
}

/// Loss plus gradients with respect to the online model parameters θ.
#[derive(Clone, Debug)]
pub struct ModelLossOutput {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, DenseArray>,
}

struct ChunkOut {
    steps: Vec<(usize, StepTerms, f64)>,
    grads: BTreeMap<String, DenseArray>,
}

fn eval_chunk(
    models: &ModelSet,
    batch: &SegmentBatch,
    ks: std::ops::Range<usize>,
    perm: &[usize],
    targets: Option<&[StepTargets]>,
    c: &LossCoefficients,
    with_grads: bool,
) -> Result<ChunkOut> {
    let mut tape = Tape::new();
    let mut steps = Vec::with_capacity(ks.len());
    let mut acc: Option<Var> = None;
    for k in ks {
        let out = match targets {
            Some(t) => step_on_tape(&mut tape, models, batch, k, perm, &t[k], c)?,
            None => {
                let t = step_targets(models, batch, k, c.gamma)?;
                step_on_tape(&mut tape, models, batch, k, perm, &t, c)?
            }
        };
        let w = c.lambda.powi(k as i32);
        let lw = tape.scale(out.loss, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, lw)?,
            None => lw,
        });
        steps.push((k, out.terms, out.q_mean));
    }
    let grads = match (with_grads, acc) {
        (true, Some(loss)) => tape.backward(loss)?.into_named(),
        _ => BTreeMap::new(),
    };
    Ok(ChunkOut { steps, grads })
}

fn split_ranges(n: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let w = workers.clamp(1, n.max(1));
    let base = n / w;
    let extra = n % w;
    let mut out = Vec::with_capacity(w);
    let mut start = 0;
    for i in 0..w {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// `Σ_{k=0}^{H} λ^k L_k` over a segment batch, with the horizon split into
/// `workers` contiguous chunks evaluated on separate threads. Each worker
/// computes the stopped targets of its own steps.
pub fn total_model_loss(
    models: &ModelSet,
    batch: &SegmentBatch,
    perm: &[usize],
    coeffs: &LossCoefficients,
    workers: usize,
) -> Result<ModelLossOutput> {
    model_loss_impl(models, batch, perm, None, coeffs, workers, true)
}

/// [`total_model_loss`] with externally supplied stopped targets.
pub fn total_model_loss_with_targets(
    models: &ModelSet,
    batch: &SegmentBatch,
    perm: &[usize],
    targets: &[StepTargets],
    coeffs: &LossCoefficients,
    workers: usize,
    with_grads: bool,
) -> Result<ModelLossOutput> {
    if targets.len() != batch.horizon() + 1 {
        return Err(Error::Contract(format!(
            "{} step targets for horizon {}",
            targets.len(),
            batch.horizon()
        )));
    }
    model_loss_impl(models, batch, perm, Some(targets), coeffs, workers, with_grads)
}

/// Value-only variant of [`total_model_loss`].
pub fn total_model_loss_value(
    models: &ModelSet,
    batch: &SegmentBatch,
    perm: &[usize],
    coeffs: &LossCoefficients,
) -> Result<LossBreakdown> {
    Ok(model_loss_impl(models, batch, perm, None, coeffs, 1, false)?.breakdown)
}

fn model_loss_impl(
    models: &ModelSet,
    batch: &SegmentBatch,
    perm: &[usize],
    targets: Option<&[StepTargets]>,
    coeffs: &LossCoefficients,
    workers: usize,
    with_grads: bool,
) -> Result<ModelLossOutput> {
    batch.validate()?;
    coeffs.validate()?;
    check_perm(perm, batch.batch_size())?;
    let n = batch.horizon() + 1;
    let ranges = split_ranges(n, workers);
    let chunks: Vec<Result<ChunkOut>> = if ranges.len() == 1 {
        vec![eval_chunk(models, batch, 0..n, perm, targets, coeffs, with_grads)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .cloned()
                .map(|r| scope.spawn(move || eval_chunk(models, batch, r, perm, targets, coeffs, with_grads)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("loss worker panicked")).collect()
        })
    };

    let mut per_step = vec![StepTerms::default(); n];
    let mut q_means = vec![0.0; n];
    let mut grads: BTreeMap<String, DenseArray> = BTreeMap::new();
    for chunk in chunks {
        let chunk = chunk?;
        for (k, t, q) in chunk.steps {
            per_step[k] = t;
            q_means[k] = q;
        }
        for (name, g) in chunk.grads {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    let breakdown = LossBreakdown::from_steps(per_step, &q_means, coeffs);
    Ok(ModelLossOutput { breakdown, grads })
}

/// Reference objective with the latent rollout used by the predecessor
/// method: only `s_0` is encoded and later latents come from the learned
/// dynamics, so steps must be evaluated in order. Terms A–C only.
pub fn sequential_rollout_loss(
    models: &ModelSet,
    batch: &SegmentBatch,
    coeffs: &LossCoefficients,
) -> Result<ModelLossOutput> {
    batch.validate()?;
    coeffs.validate()?;
    let n = batch.horizon() + 1;
    let mut tape = Tape::new();
    let s0 = tape.constant(batch.obs[0].clone());
    let mut z = models.encode(&mut tape, s0, Src::Train)?;
    let mut per_step = Vec::with_capacity(n);
    let mut q_means = Vec::with_capacity(n);
    let mut acc: Option<Var> = None;
    for k in 0..n {
        let s_next = tape.constant(batch.obs[k + 1].clone());
        let a_k = tape.constant(batch.actions[k].clone());
        let r_k = tape.constant(batch.rewards[k].clone());

        let r_hat = models.predict_reward(&mut tape, z, a_k, Src::Train)?;
        let dr = tape.sub(r_hat, r_k)?;
        let dr = tape.square(dr);
        let term_a = tape.mean(dr);

        let z_next_enc = models.encode(&mut tape, s_next, Src::Online)?;
        let a_next = models.policy_mean(&mut tape, z_next_enc, false)?;
        let q_next = models.q_value(&mut tape, z_next_enc, a_next, QMode::Min, Src::Target)?;
        let disc = tape.scale(q_next, coeffs.gamma);
        let td = tape.add(r_k, disc)?;
        let td = tape.detach(td);
        let q1 = models.q_value(&mut tape, z, a_k, QMode::Head1, Src::Train)?;
        let q2 = models.q_value(&mut tape, z, a_k, QMode::Head2, Src::Train)?;
        q_means.push(0.5 * (tape.value(q1).mean() + tape.value(q2).mean()));
        let e1 = tape.sub(q1, td)?;
        let e1 = tape.square(e1);
        let e2 = tape.sub(q2, td)?;
        let e2 = tape.square(e2);
        let e = tape.add(e1, e2)?;
        let term_b = tape.mean(e);

        let z_pred = models.predict_next(&mut tape, z, a_k, Src::Train)?;
        let z_tgt = models.encode(&mut tape, s_next, Src::Target)?;
        let dz = tape.sub(z_pred, z_tgt)?;
        let dz = tape.square(dz);
        let dz = tape.row_sum(dz);
        let term_c = tape.mean(dz);

        let terms = StepTerms {
            reward: check_finite(tape.value(term_a).item(), "reward loss", k)?,
            value: check_finite(tape.value(term_b).item(), "value loss", k)?,
            consistency: check_finite(tape.value(term_c).item(), "consistency loss", k)?,
            bisim: 0.0,
        };
        let a = tape.scale(term_a, coeffs.c1);
        let b = tape.scale(term_b, coeffs.c2);
        let cc = tape.scale(term_c, coeffs.c3);
        let l = tape.add(a, b)?;
        let l = tape.add(l, cc)?;
        let lw = tape.scale(l, coeffs.lambda.powi(k as i32));
        acc = Some(match acc {
            Some(x) => tape.add(x, lw)?,
            None => lw,
        });
        per_step.push(terms);
        z = z_pred;
    }
    let grads = tape.backward(acc.expect("at least one step"))?.into_named();
    let mut no_bisim = coeffs.clone();
    no_bisim.c4 = 0.0;
    Ok(ModelLossOutput { breakdown: LossBreakdown::from_steps(per_step, &q_means, &no_bisim), grads })
}

#[derive(Clone, Debug)]
pub struct PolicyLossOutput {
    pub loss: f64,
    pub grads: BTreeMap<String, DenseArray>,
}

/// `-Σ_k λ^k mean Q(z_k, π(z̄_k))` with `z_k` from the online encoder and
/// `z̄_k` from the target encoder, both constant; only the policy
/// parameters receive gradients.
pub fn policy_loss(models: &ModelSet, batch: &SegmentBatch, coeffs: &LossCoefficients) -> Result<PolicyLossOutput> {
    batch.validate()?;
    let mut tape = Tape::new();
    let mut acc: Option<Var> = None;
    for k in 0..=batch.horizon() {
        let s = tape.constant(batch.obs[k].clone());
        let z = models.encode(&mut tape, s, Src::Online)?;
        let zbar = models.encode(&mut tape, s, Src::Target)?;
        let a = models.policy_mean(&mut tape, zbar, true)?;
        let q = models.q_value(&mut tape, z, a, coeffs.policy_q_mode, Src::Online)?;
        let qm = tape.mean(q);
        let term = tape.scale(qm, -coeffs.lambda.powi(k as i32));
        acc = Some(match acc {
            Some(x) => tape.add(x, term)?,
            None => term,
        });
    }
    let loss = acc.expect("at least one step");
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { context: "policy loss".into() });
    }
    let grads = tape.backward(loss)?.into_named();
    Ok(PolicyLossOutput { loss: value, grads })
}

#[cfg(test)]
mod tests;
