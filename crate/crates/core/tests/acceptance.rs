//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are
//! always visible. The two training criteria take hours on one core: they
//! are judged from run directories named by `BSMPC_ACCEPTANCE_RUNS`
//! (layout `c8/seed_N`, `c9_bisim/seed_N`, `c9_ablation/seed_N`, as written
//! by `bsmpc train` with the files in `configs/`), trained in-process when
//! `BSMPC_ACCEPTANCE_FULL=1`, and otherwise reported as not run.
//!
//! The process exits nonzero when a criterion fails that is not listed in
//! [`KNOWN_RED`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use bsmpc_core::bisim::{
    ferns_bisim_metric, one_hot_policy, pi_bisim_metric, random_instance, verify_all, BisimWeights, MetricMatrix,
};
use bsmpc_core::config::RunConfig;
use bsmpc_core::envs::TabularMdp;
use bsmpc_core::losses::timing::{run_loss_bench, LossBenchConfig};
use bsmpc_core::losses::{
    permute_batch, policy_loss, segment_targets, total_model_loss, total_model_loss_with_targets, LossCoefficients,
    SegmentBatch,
};
use bsmpc_core::models::{ModelConfig, ModelSet};
use bsmpc_core::planner::{plan, refit, LatentModel, PlanConfig, PlanState};
use bsmpc_core::trainer::{read_metrics, Trainer};
use bsmpc_core::{rng_from_seed, DenseArray, Result};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Criteria expected to fail, with the reason recorded in the decisions
/// ledger. They still print FAIL; they just do not fail the build.
const KNOWN_RED: &[(u32, &str)] = &[
    (6, "reward bound fails on clusters whose members disagree on the optimal action"),
    (7, "speedup clause needs at least 4 cores"),
    (9, "bisimulation-regularised latent underperforms the ablation on the distractor task"),
];

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn line(n: u32, name: &str, v: &Verdict, secs: f64) -> String {
    let (tag, detail) = match v {
        Verdict::Pass(d) => ("PASS", d),
        Verdict::Fail(d) => ("FAIL", d),
        Verdict::NotRun(d) => ("NOT RUN", d),
    };
    format!("criterion {n:>2} {tag:<7} {name} ({secs:.1} s): {detail}")
}

fn verdict(pass: bool, detail: String) -> Verdict {
    if pass {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// ---------------------------------------------------------------- 1

fn normal(rng: &mut bsmpc_core::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn fd_instance(seed: u64) -> (ModelSet, SegmentBatch, Vec<usize>, LossCoefficients) {
    let mut rng = rng_from_seed(10_000 + seed);
    let state_dim = rng.random_range(2..=4);
    let action_dim = rng.random_range(1..=2);
    let cfg = ModelConfig {
        state_dim,
        action_dim,
        latent_dim: rng.random_range(2..=8),
        hidden_dim: rng.random_range(4..=16),
        action_low: vec![-1.0; action_dim],
        action_high: vec![1.0; action_dim],
    };
    let mut m = ModelSet::new(cfg, &mut rng).unwrap();
    // Targets away from the online weights so the stopped branches differ.
    for (_, v) in m.target.iter_mut() {
        for x in v.data_mut() {
            *x += 0.1 * normal(&mut rng);
        }
    }
    let (b, h) = (4, 3);
    let mut mat = |cols: usize, scale: f64| {
        let d: Vec<f64> = (0..b * cols).map(|_| scale * normal(&mut rng)).collect();
        DenseArray::new(vec![b, cols], d).unwrap()
    };
    let batch = SegmentBatch {
        obs: (0..h + 2).map(|_| mat(state_dim, 1.0)).collect(),
        actions: (0..h + 1).map(|_| mat(action_dim, 0.5)).collect(),
        rewards: (0..h + 1).map(|_| mat(1, 1.0)).collect(),
    };
    let perm = permute_batch(b, &mut rng).unwrap();
    let coeffs = LossCoefficients { c4: 0.5, ..LossCoefficients::default() };
    (m, batch, perm, coeffs)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Signs of `z_i - z_perm(i)` for every step, row and coordinate. The ℓ1
/// latent distance is not differentiable where one of them is zero.
fn kink_signature(m: &ModelSet, b: &SegmentBatch, perm: &[usize]) -> Vec<i8> {
    let mut sig = Vec::new();
    for obs in &b.obs[..b.horizon() + 1] {
        let z = m.encode_array(obs).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            sig.extend(z.row(i).iter().zip(z.row(j)).map(|(x, y)| (x - y).signum() as i8 * i8::from(x != y)));
        }
    }
    sig
}

fn perturbed(m: &ModelSet, name: &str, i: usize, d: f64) -> ModelSet {
    let mut mm = m.clone();
    mm.theta.params_mut().get_mut(name).unwrap().data_mut()[i] += d;
    mm
}

/// Worst relative error over every online model and policy parameter, and
/// the number of entries whose stencil had to shrink to avoid a kink.
fn fd_worst(m: &ModelSet, b: &SegmentBatch, perm: &[usize], c: &LossCoefficients) -> (f64, usize) {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut shrunk = 0;
    let analytic = total_model_loss(m, b, perm, c, 1).unwrap().grads;
    let targets = segment_targets(m, b, c.gamma).unwrap();
    let loss = |mm: &ModelSet| total_model_loss_with_targets(mm, b, perm, &targets, c, 1, false).unwrap().breakdown.total;
    let names: Vec<String> = m.theta.params().names().cloned().collect();
    for name in &names {
        for i in 0..m.theta.params().get(name).unwrap().len() {
            // Central differences need a smooth stencil.
            let mut step = h;
            let (mut lo, mut hi) = (perturbed(m, name, i, -step), perturbed(m, name, i, step));
            while step > 1e-9 && kink_signature(&lo, b, perm) != kink_signature(&hi, b, perm) {
                step /= 10.0;
                lo = perturbed(m, name, i, -step);
                hi = perturbed(m, name, i, step);
            }
            shrunk += usize::from(step < h);
            let numeric = (loss(&hi) - loss(&lo)) / (2.0 * step);
            let a = analytic.get(name).map(|g| g.data()[i]).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    let analytic = policy_loss(m, b, c).unwrap().grads;
    for (name, g) in &analytic {
        for i in 0..g.len() {
            let eval = |d: f64| {
                let mut mm = m.clone();
                mm.psi.params_mut().get_mut(name).unwrap().data_mut()[i] += d;
                policy_loss(&mm, b, c).unwrap().loss
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    (worst, shrunk)
}

fn criterion_1() -> Verdict {
    let mut worst: f64 = 0.0;
    let (mut entries, mut shrunk) = (0, 0);
    for seed in 0..20 {
        let (m, b, perm, c) = fd_instance(seed);
        let count = |p: &bsmpc_core::ParamSet| p.names().map(|n| p.get(n).unwrap().len()).sum::<usize>();
        entries += count(m.theta.params()) + count(m.psi.params());
        let (w, k) = fd_worst(&m, &b, &perm, &c);
        worst = worst.max(w);
        shrunk += k;
    }
    verdict(
        worst <= 1e-4,
        format!("20 instances, {entries} parameters, worst relative error {worst:.2e} (limit 1e-4); {shrunk} stencils narrowed to avoid an l1 kink"),
    )
}

// ---------------------------------------------------------------- 2

fn self_loops(r0: f64, r1: f64, gamma: f64) -> TabularMdp {
    TabularMdp::new(2, 1, gamma, vec![r0, r1], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
}

fn criterion_2() -> Verdict {
    let mut worst: f64 = 0.0;
    for &(r0, r1) in &[(0.0f64, 1.0f64), (0.2, 0.7), (0.9, 0.15)] {
        let dr = (r1 - r0).abs();
        for &gamma in &[0.5, 0.9, 0.99] {
            let mdp = self_loops(r0, r1, gamma);
            let pol = one_hot_policy(&[0, 0], 1);
            let d = pi_bisim_metric(&mdp, &pol, BisimWeights::discounted(gamma), 1e-12).unwrap().metric;
            worst = worst.max((d.get(0, 1) - dr / (1.0 - gamma)).abs());
        }
        for &c in &[0.3, 0.5, 0.9] {
            let mdp = self_loops(r0, r1, 0.9);
            let pol = one_hot_policy(&[0, 0], 1);
            let d = pi_bisim_metric(&mdp, &pol, BisimWeights::convex(c), 1e-12).unwrap().metric;
            worst = worst.max((d.get(0, 1) - dr).abs());
            let f = ferns_bisim_metric(&mdp, c, 1e-12).unwrap().metric;
            worst = worst.max((f.get(0, 1) - dr).abs());
        }
    }
    verdict(worst <= 1e-9, format!("worst deviation from the closed forms {worst:.2e} (limit 1e-9)"))
}

// ---------------------------------------------------------------- 3

/// Append an exact copy of state `k`; nothing transitions into the copy.
fn with_copy(mdp: &TabularMdp, k: usize) -> TabularMdp {
    let (n, a) = (mdp.n_states, mdp.n_actions);
    let mut r = mdp.r.clone();
    r.extend_from_slice(&mdp.r[k * a..(k + 1) * a]);
    let mut p = Vec::with_capacity((n + 1) * a * (n + 1));
    for s in 0..=n {
        let src = if s == n { k } else { s };
        for act in 0..a {
            p.extend_from_slice(mdp.row(src, act));
            p.push(0.0);
        }
    }
    TabularMdp::new(n + 1, a, mdp.gamma, r, p).unwrap()
}

fn axiom_violation(m: &MetricMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.n {
        worst = worst.max(m.get(i, i).abs());
        for j in 0..m.n {
            // Symmetry is required exactly.
            if m.get(i, j) != m.get(j, i) {
                worst = f64::INFINITY;
            }
        }
    }
    worst.max(m.triangle_excess().max(0.0))
}

fn criterion_3() -> Verdict {
    let (mut worst, mut worst_pair, mut metrics) = (0.0f64, 0.0f64, 0);
    for seed in 0..100 {
        let base = random_instance(seed, 7, 3, 0.9).unwrap();
        let mdp = with_copy(&base, (seed as usize) % base.n_states);
        let (n, a) = (mdp.n_states, mdp.n_actions);
        let policy: Vec<usize> = (0..n).map(|s| (s * 7 + seed as usize) % a).collect();
        // The copy must take the original's action to stay bisimilar.
        let mut policy = policy;
        policy[n - 1] = policy[(seed as usize) % base.n_states];
        let pol = one_hot_policy(&policy, a);
        let ms = [
            pi_bisim_metric(&mdp, &pol, BisimWeights::discounted(mdp.gamma), 1e-11).unwrap().metric,
            pi_bisim_metric(&mdp, &pol, BisimWeights::convex(0.5), 1e-11).unwrap().metric,
            ferns_bisim_metric(&mdp, 0.9, 1e-11).unwrap().metric,
        ];
        for m in &ms {
            metrics += 1;
            worst = worst.max(axiom_violation(m));
            worst_pair = worst_pair.max(m.get((seed as usize) % base.n_states, n - 1));
        }
    }
    verdict(
        worst <= 1e-9 && worst_pair <= 1e-9,
        format!("{metrics} metrics on 100 MDPs, worst axiom violation {worst:.2e}, worst bisimilar-pair distance {worst_pair:.2e} (limit 1e-9)"),
    )
}

// ---------------------------------------------------------------- 4-6

struct GridResult {
    runs: usize,
    value_fail: usize,
    value_worst: f64,
    return_checks: usize,
    return_fail: usize,
    return_worst: f64,
    tighter_h: usize,
    tighter_h_minus_1: usize,
    reward_fail: usize,
    reward_worst: f64,
    reward_fail_mixed: usize,
    on_policy_worst: f64,
    secs: f64,
}

/// 100 random MDPs (n ≤ 8, |A| ≤ 3, γ = 0.9) × ε × c, horizons 1, 3, 5.
fn bound_grid() -> GridResult {
    let t = Instant::now();
    let mut g = GridResult {
        runs: 0,
        value_fail: 0,
        value_worst: 0.0,
        return_checks: 0,
        return_fail: 0,
        return_worst: 0.0,
        tighter_h: 0,
        tighter_h_minus_1: 0,
        reward_fail: 0,
        reward_worst: 0.0,
        reward_fail_mixed: 0,
        on_policy_worst: 0.0,
        secs: 0.0,
    };
    let ratio = |lhs: f64, rhs: f64| if rhs > 0.0 { lhs / rhs } else if lhs > 0.0 { f64::INFINITY } else { 0.0 };
    for seed in 0..100 {
        let mdp = random_instance(seed, 8, 3, 0.9).unwrap();
        for &eps in &[0.05, 0.2] {
            for &c in &[0.5, 0.9] {
                let r = verify_all(&mdp, c, eps, &[1, 3, 5], 1e-8).unwrap();
                g.runs += 1;
                g.value_fail += usize::from(!r.value_bound.pass);
                g.value_worst = g.value_worst.max(ratio(r.value_bound.max_lhs, r.value_bound.rhs));
                for t3 in &r.return_bound {
                    g.return_checks += 1;
                    g.return_fail += usize::from(!t3.pass());
                    g.return_worst = g.return_worst.max(ratio(t3.max_lhs, t3.looser()));
                    if t3.bound_h_minus_1 < t3.bound_h {
                        g.tighter_h_minus_1 += 1;
                    } else {
                        g.tighter_h += 1;
                    }
                }
                let l1 = &r.reward_bound;
                if !l1.pass {
                    g.reward_fail += 1;
                    g.reward_fail_mixed += usize::from(l1.mixed_clusters > 0);
                }
                g.reward_worst = g.reward_worst.max(ratio(l1.max_lhs, l1.rhs));
                g.on_policy_worst = g.on_policy_worst.max(ratio(l1.on_policy_max_lhs, l1.rhs));
            }
        }
    }
    g.secs = t.elapsed().as_secs_f64();
    g
}

fn criterion_4(g: &GridResult) -> Verdict {
    verdict(
        g.value_fail == 0,
        format!("{} violations in {} runs, worst lhs/rhs {:.3}", g.value_fail, g.runs, g.value_worst),
    )
}

fn criterion_5(g: &GridResult) -> Verdict {
    verdict(
        g.return_fail == 0,
        format!(
            "{} violations of the looser bound in {} checks, worst lhs/rhs {:.3}; tighter variant 1-gamma^H in {} checks, 1-gamma^(H-1) in {}",
            g.return_fail, g.return_checks, g.return_worst, g.tighter_h, g.tighter_h_minus_1
        ),
    )
}

fn criterion_6(g: &GridResult) -> Verdict {
    verdict(
        g.reward_fail == 0,
        format!(
            "{} violations in {} runs ({} in clusters with mixed optimal actions), worst lhs/rhs {:.3}; on-policy reward gap at most {:.3} of the bound",
            g.reward_fail, g.runs, g.reward_fail_mixed, g.reward_worst, g.on_policy_worst
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let cfg = LossBenchConfig { batch: 256, horizon: 5, workers: vec![1, 4], repeats: 10, ..LossBenchConfig::default() };
    let r = run_loss_bench(&cfg).unwrap();
    let diff = r.max_rel_diff();
    let speedup = r.row("parallel", 4).map(|x| x.speedup_vs_sequential).unwrap_or(f64::NAN);
    let cores = r.available_cores;
    let base = format!("W=1 vs W=4 relative difference {diff:.2e} (limit 1e-12); parallel W=4 vs sequential {speedup:.3}x (needs 1.1x)");
    if cores < 4 {
        return Verdict::Fail(format!("{base}; precondition unmet: {cores} core(s) available, speedup clause needs 4"));
    }
    verdict(diff <= 1e-12 && speedup >= 1.1, format!("{base} on {cores} cores"))
}

// ---------------------------------------------------------------- 8-9

const C8_CONFIG: &str = include_str!("../../../configs/pendulum_desk.toml");
const C9_CONFIG: &str = include_str!("../../../configs/pendulum_distractors.toml");

fn train_all(text: &str, overrides: &[(String, String)], root: &Path) -> Result<()> {
    let cfg = RunConfig::from_toml_with(text, overrides)?;
    for &s in &cfg.seeds {
        Trainer::new(cfg.clone(), s)?.run(&root.join(format!("seed_{s}")), "acceptance")?;
    }
    Ok(())
}

fn seed_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root)
        .map(|it| it.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.join("metrics.csv").exists()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

/// `(env_step, mean)` of every evaluation in a run.
fn evals(dir: &Path) -> Vec<(u64, f64)> {
    read_metrics(&dir.join("metrics.csv"))
        .unwrap()
        .into_iter()
        .filter(|r| r.kind == "eval")
        .filter_map(|r| r.eval_return_mean.map(|m| (r.env_step, m)))
        .collect()
}

/// Loss settings recorded in a run's manifest.
fn loss_settings(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap_or_default();
    let cfg = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|m| m["config"].as_str().and_then(|c| RunConfig::from_toml(c).ok()));
    match cfg {
        Some(c) => format!("c4 {}, bisim distance {:?}", c.loss.c4, c.loss.bisim_dyn_distance),
        None => "no manifest".into(),
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn judge_8(root: &Path) -> Verdict {
    let dirs = seed_dirs(root);
    if dirs.len() < 3 {
        return Verdict::NotRun(format!("{} seed runs under {}", dirs.len(), root.display()));
    }
    let mut reached = 0;
    let mut parts = Vec::new();
    for d in &dirs {
        let e = evals(d);
        let hit = e.iter().find(|(s, m)| *s <= 30_000 && *m >= -300.0);
        let best = e.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        reached += usize::from(hit.is_some());
        let name = d.file_name().unwrap().to_string_lossy();
        parts.push(match hit {
            Some((s, m)) => format!("{name} {m:.1} at {s} steps"),
            None => format!("{name} best {best:.1}"),
        });
    }
    verdict(
        reached >= 2,
        format!("{reached}/{} seeds reach -300 within 30k steps ({}); {}", dirs.len(), parts.join(", "), loss_settings(&dirs[0])),
    )
}

fn judge_9(bisim: &Path, ablation: &Path) -> Verdict {
    let (db, da) = (seed_dirs(bisim), seed_dirs(ablation));
    if db.len() < 3 || da.len() < 3 {
        return Verdict::NotRun(format!("{} and {} seed runs found", db.len(), da.len()));
    }
    let finals = |dirs: &[PathBuf]| -> Vec<f64> { dirs.iter().filter_map(|d| evals(d).last().map(|x| x.1)).collect() };
    let (mut fb, mut fa) = (finals(&db), finals(&da));
    if fb.len() < 3 || fa.len() < 3 {
        return Verdict::Fail("a run finished without a final evaluation".into());
    }
    // Identity permutation must give an exactly zero bisimulation term.
    let (mut checks, mut worst) = (0usize, 0.0f64);
    for d in db.iter().chain(&da) {
        for r in read_metrics(&d.join("metrics.csv")).unwrap() {
            if let Some(v) = r.identity_bisim {
                checks += 1;
                worst = worst.max(v.abs());
            }
        }
    }
    let (mb, ma) = (median(&mut fb), median(&mut fa));
    verdict(
        mb >= ma && checks > 0 && worst == 0.0,
        format!(
            "median final return {mb:.1} ({}) vs ablation {ma:.1} ({}); identity-permutation bisim term max {worst:e} over {checks} checks",
            loss_settings(&db[0]),
            loss_settings(&da[0])
        ),
    )
}

fn training_criteria() -> (Verdict, Verdict) {
    if std::env::var("BSMPC_ACCEPTANCE_FULL").is_ok_and(|v| v == "1") {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let ablate = [("loss.c4".to_string(), "0".to_string())];
        let c8 = match train_all(C8_CONFIG, &[], &root.join("c8")) {
            Ok(()) => judge_8(&root.join("c8")),
            Err(e) => Verdict::Fail(format!("training failed: {e}")),
        };
        let c9 = match train_all(C9_CONFIG, &[], &root.join("c9_bisim"))
            .and_then(|_| train_all(C9_CONFIG, &ablate, &root.join("c9_ablation")))
        {
            Ok(()) => judge_9(&root.join("c9_bisim"), &root.join("c9_ablation")),
            Err(e) => Verdict::Fail(format!("training failed: {e}")),
        };
        return (c8, c9);
    }
    match std::env::var_os("BSMPC_ACCEPTANCE_RUNS").map(PathBuf::from) {
        Some(root) => (judge_8(&root.join("c8")), judge_9(&root.join("c9_bisim"), &root.join("c9_ablation"))),
        None => {
            let why = "multi-hour training; set BSMPC_ACCEPTANCE_RUNS=<dir> or BSMPC_ACCEPTANCE_FULL=1";
            (Verdict::NotRun(why.into()), Verdict::NotRun(why.into()))
        }
    }
}

// ---------------------------------------------------------------- 10

/// `z' = z + a`, `r = -z² - 0.1a²`, zero prior policy and terminal value.
struct Quadratic;

impl LatentModel for Quadratic {
    fn latent_dim(&self) -> usize {
        1
    }
    fn action_low(&self) -> &[f64] {
        &[-1.0]
    }
    fn action_high(&self) -> &[f64] {
        &[1.0]
    }
    fn step(&self, z: &DenseArray, a: &DenseArray) -> Result<(DenseArray, DenseArray)> {
        let next = z.data().iter().zip(a.data()).map(|(z, a)| z + a).collect();
        let r = z.data().iter().zip(a.data()).map(|(z, a)| -z * z - 0.1 * a * a).collect();
        Ok((DenseArray::new(vec![z.rows(), 1], next)?, DenseArray::new(vec![z.rows(), 1], r)?))
    }
    fn policy(&self, z: &DenseArray) -> Result<DenseArray> {
        Ok(DenseArray::zeros(&[z.rows(), 1]))
    }
    fn value(&self, z: &DenseArray) -> Result<DenseArray> {
        Ok(DenseArray::zeros(&[z.rows(), 1]))
    }
}

/// First action of the best 3-step sequence on a uniform grid.
fn grid_optimum(z: f64, gamma: f64, n: usize) -> f64 {
    let grid: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &a0 in &grid {
        let z1 = z + a0;
        let s0 = -z * z - 0.1 * a0 * a0;
        for &a1 in &grid {
            let z2 = z1 + a1;
            let s1 = s0 + gamma * (-z1 * z1 - 0.1 * a1 * a1);
            for &a2 in &grid {
                let s = s1 + gamma * gamma * (-z2 * z2 - 0.1 * a2 * a2);
                if s > best.0 {
                    best = (s, a0);
                }
            }
        }
    }
    best.1
}

fn criterion_10() -> Verdict {
    let cfg = PlanConfig { horizon: 3, horizon_start: 3, min_std_start: 0.05, min_std_end: 0.05, ..PlanConfig::default() };
    assert_eq!((cfg.iterations, cfg.population), (6, 512));
    let mut worst_gap: f64 = 0.0;
    for (seed, start) in [(1u64, 0.7), (2, -0.5), (3, 1.2), (4, 0.2), (5, -1.5), (6, 0.0)] {
        let oracle = grid_optimum(start, cfg.gamma, 201);
        let mut state = PlanState::new(&cfg, &[-1.0], &[1.0]);
        let z = DenseArray::new(vec![1, 1], vec![start]).unwrap();
        let out = plan(&Quadratic, &z, &cfg, &mut state, 0, 0.0, &mut rng_from_seed(seed)).unwrap();
        worst_gap = worst_gap.max((out.action[0] - oracle).abs());
    }
    let mut rng = rng_from_seed(99);
    let mut worst_shift: f64 = 0.0;
    for _ in 0..50 {
        let elites: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let scores: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..0.0)).collect();
        let (mu, sigma) = refit(&elites, &scores, 0.5, 0.0);
        for shift in [-1e3, -3.25, 0.5, 17.0, 1e3] {
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let (m2, s2) = refit(&elites, &shifted, 0.5, 0.0);
            for (a, b) in mu.iter().zip(&m2).chain(sigma.iter().zip(&s2)) {
                worst_shift = worst_shift.max((a - b).abs());
            }
        }
    }
    verdict(
        worst_gap <= 0.05 && worst_shift <= 1e-12,
        format!("first action within {worst_gap:.4} of the grid optimum (limit 0.05); score shift moves the update by {worst_shift:.1e} (limit 1e-12)"),
    )
}

// ----------------------------------------------------------------

fn main() {
    let mut lines = Vec::new();
    let mut unexpected = Vec::new();
    let mut record = |n: u32, name: &str, v: Verdict, secs: f64| {
        let l = line(n, name, &v, secs);
        println!("{l}");
        let red = KNOWN_RED.iter().find(|(k, _)| *k == n);
        match (&v, red) {
            (Verdict::Fail(_), None) => unexpected.push(n),
            (Verdict::Pass(_), Some(_)) => println!("             note: criterion {n} is listed as known red but passed"),
            _ => {}
        }
        lines.push(l);
    };
    let timed = |f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        (v, t.elapsed().as_secs_f64())
    };

    let (v, s) = timed(&criterion_1);
    record(1, "gradient fidelity", v, s);
    let (v, s) = timed(&criterion_2);
    record(2, "bisimulation closed forms", v, s);
    let (v, s) = timed(&criterion_3);
    record(3, "metric axioms", v, s);
    let g = bound_grid();
    record(4, "value bound", criterion_4(&g), g.secs);
    record(5, "return bound", criterion_5(&g), 0.0);
    record(6, "reward bound", criterion_6(&g), 0.0);
    let (v, s) = timed(&criterion_7);
    record(7, "parallel loss equivalence and speedup", v, s);
    let t = Instant::now();
    let (v8, v9) = training_criteria();
    let s = t.elapsed().as_secs_f64();
    record(8, "pendulum swing-up", v8, s);
    record(9, "distractor robustness", v9, 0.0);
    let (v, s) = timed(&criterion_10);
    record(10, "planner sanity", v, s);

    for (n, why) in KNOWN_RED {
        println!("known red {n}: {why}");
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
