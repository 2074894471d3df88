use super::*;
use crate::models::ModelConfig;
use crate::{rng_from_seed, ParamSet};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn small_models(seed: u64) -> ModelSet {
    let cfg = ModelConfig {
        state_dim: 3,
        action_dim: 2,
        latent_dim: 4,
        hidden_dim: 6,
        action_low: vec![-1.0, -2.0],
        action_high: vec![1.0, 0.5],
    };
    let mut rng = rng_from_seed(seed);
    let mut m = ModelSet::new(cfg, &mut rng).unwrap();
    // Move the targets away from the online weights so both branches matter.
    for (_, v) in m.target.iter_mut() {
        for x in v.data_mut() {
            *x += 0.1 * { let v: f64 = StandardNormal.sample(&mut rng); v };
        }
    }
    m
}

fn random_batch(seed: u64, b: usize, h: usize, m: &ModelSet) -> SegmentBatch {
    let mut rng = rng_from_seed(seed);
    let mut mat = |rows: usize, cols: usize, scale: f64| {
        let data: Vec<f64> = (0..rows * cols).map(|_| scale * { let v: f64 = StandardNormal.sample(&mut rng); v }).collect();
        DenseArray::new(vec![rows, cols], data).unwrap()
    };
    let obs = (0..h + 2).map(|_| mat(b, m.cfg.state_dim, 1.0)).collect();
    let actions = (0..h + 1).map(|_| mat(b, m.cfg.action_dim, 0.5)).collect();
    let rewards = (0..h + 1).map(|_| mat(b, 1, 1.0)).collect();
    SegmentBatch { obs, actions, rewards }
}

fn set_param(p: &mut ParamSet, name: &str, data: &[f64]) {
    let a = p.get_mut(name).unwrap();
    assert_eq!(a.len(), data.len(), "{name}");
    a.data_mut().copy_from_slice(data);
}

/// Encoder `h(s) = s` and dynamics `d(z, a) = z` on positive inputs, where
/// every ELU is the identity.
fn identity_models() -> ModelSet {
    let cfg = ModelConfig {
        state_dim: 1,
        action_dim: 1,
        latent_dim: 1,
        hidden_dim: 1,
        action_low: vec![-1.0],
        action_high: vec![1.0],
    };
    let mut m = ModelSet::new(cfg, &mut rng_from_seed(0)).unwrap();
    for set in [m.theta.params_mut(), &mut m.target] {
        for net in ["encoder", "dynamics"] {
            for l in 0..3 {
                let w: &[f64] = if net == "dynamics" && l == 0 { &[1.0, 0.0] } else { &[1.0] };
                set_param(set, &format!("{net}.l{l}.w"), w);
                set_param(set, &format!("{net}.l{l}.b"), &[0.0]);
            }
        }
    }
    m
}

fn two_sample_batch() -> SegmentBatch {
    let col = |v: &[f64]| DenseArray::column(v).unwrap();
    SegmentBatch {
        obs: vec![col(&[1.0, 3.0]), col(&[2.0, 2.5])],
        actions: vec![col(&[0.3, -0.2])],
        rewards: vec![col(&[0.5, 0.2])],
    }
}

fn coeffs() -> LossCoefficients {
    LossCoefficients { c4: 0.3, ..LossCoefficients::default() }
}

#[test]
fn hand_computed_bisim_term() {
    let m = identity_models();
    let c = LossCoefficients { gamma: 0.9, ..coeffs() };
    let t = per_step_loss(&m, &two_sample_batch(), 0, &[1, 0], &c).unwrap();
    // (|1 - 3| - |0.5 - 0.2| - 0.9 * (1 - 3)^2)^2 for both rows.
    assert!((t.bisim - 3.61).abs() < 1e-12, "{}", t.bisim);

    let c = LossCoefficients { bisim_dyn_distance: DynDistance::L2, ..c };
    let t = per_step_loss(&m, &two_sample_batch(), 0, &[1, 0], &c).unwrap();
    let expected = (2.0f64 - 0.3 - 0.9 * 2.0).powi(2);
    assert!((t.bisim - expected).abs() < 1e-12);
}

#[test]
fn identity_permutation_zeroes_bisim_term() {
    let m = small_models(1);
    let b = random_batch(2, 5, 2, &m);
    for k in 0..3 {
        let t = per_step_loss(&m, &b, k, &[0, 1, 2, 3, 4], &coeffs()).unwrap();
        assert_eq!(t.bisim, 0.0);
        assert!(t.reward > 0.0 && t.value > 0.0 && t.consistency > 0.0);
    }
}

#[test]
fn perfect_reward_model_zeroes_reward_term() {
    let mut m = small_models(3);
    let b = random_batch(4, 4, 0, &m);
    // Constant reward head (zero output weights), rewards equal to its bias.
    let w = m.theta.params().get("reward.l2.w").unwrap().len();
    set_param(m.theta.params_mut(), "reward.l2.w", &vec![0.0; w]);
    set_param(m.theta.params_mut(), "reward.l2.b", &[0.7]);
    let mut b = b;
    b.rewards[0] = DenseArray::full(&[4, 1], 0.7);
    let t = per_step_loss(&m, &b, 0, &[1, 0, 3, 2], &coeffs()).unwrap();
    assert_eq!(t.reward, 0.0);
}

#[test]
fn horizon_out_of_range() {
    let m = small_models(1);
    let b = random_batch(2, 3, 1, &m);
    assert!(matches!(per_step_loss(&m, &b, 2, &[0, 1, 2], &coeffs()), Err(Error::Contract(_))));
}

#[test]
fn non_finite_reports_term() {
    let m = small_models(1);
    let mut b = random_batch(2, 3, 0, &m);
    b.rewards[0] = DenseArray::from_raw(vec![3, 1], vec![1e300, -1e300, 0.0]);
    let err = per_step_loss(&m, &b, 0, &[1, 2, 0], &coeffs()).unwrap_err();
    match err {
        Error::NonFinite { context } => assert!(context.contains("step 0"), "{context}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn single_step_total_is_first_step() {
    let m = small_models(5);
    let b = random_batch(6, 4, 0, &m);
    let perm = [2, 0, 3, 1];
    let out = total_model_loss(&m, &b, &perm, &coeffs(), 1).unwrap();
    let t = per_step_loss(&m, &b, 0, &perm, &coeffs()).unwrap();
    assert_eq!(out.breakdown.total, t.weighted(&coeffs()));
}

#[test]
fn equal_steps_sum_geometrically() {
    let m = small_models(7);
    let one = random_batch(8, 4, 0, &m);
    let b = SegmentBatch {
        obs: vec![one.obs[0].clone(); 4],
        actions: vec![one.actions[0].clone(); 3],
        rewards: vec![one.rewards[0].clone(); 3],
    };
    let perm = [1, 0, 3, 2];
    let c = coeffs();
    let l = per_step_loss(&m, &b, 0, &perm, &c).unwrap().weighted(&c);
    let total = total_model_loss(&m, &b, &perm, &c, 1).unwrap().breakdown.total;
    assert!((total - 1.75 * l).abs() <= 1e-12 * l.abs(), "{total} vs {}", 1.75 * l);
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn parallel_matches_single_worker() {
    let m = small_models(11);
    let b = random_batch(12, 16, 5, &m);
    let perm = permute_batch(16, &mut rng_from_seed(13)).unwrap();
    let base = total_model_loss(&m, &b, &perm, &coeffs(), 1).unwrap();
    for w in [2, 4, 6, 9] {
        let out = total_model_loss(&m, &b, &perm, &coeffs(), w).unwrap();
        assert_eq!(out.breakdown.total, base.breakdown.total, "workers {w}");
        assert_eq!(out.grads.keys().collect::<Vec<_>>(), base.grads.keys().collect::<Vec<_>>());
        for (name, g) in &out.grads {
            for (x, y) in g.data().iter().zip(base.grads[name].data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-12), "{name}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn worker_split_covers_horizon() {
    for n in 1..9 {
        for w in 1..12 {
            let r = split_ranges(n, w);
            assert_eq!(r.first().unwrap().start, 0);
            assert_eq!(r.last().unwrap().end, n);
            assert!(r.windows(2).all(|p| p[0].end == p[1].start));
            assert!(r.iter().all(|x| !x.is_empty()));
        }
    }
}

/// Central differences of the total loss with respect to every online
/// parameter entry.
fn finite_difference_check(m: &ModelSet, b: &SegmentBatch, perm: &[usize], c: &LossCoefficients) {
    let analytic = total_model_loss(m, b, perm, c, 1).unwrap().grads;
    // Stop-gradient semantics: the targets stay at their unperturbed values.
    let targets = segment_targets(m, b, c.gamma).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = m.theta.params().names().cloned().collect();
    for name in names {
        let n = m.theta.params().get(&name).unwrap().len();
        for i in 0..n {
            let eval = |delta: f64| {
                let mut mm = m.clone();
                mm.theta.params_mut().get_mut(&name).unwrap().data_mut()[i] += delta;
                total_model_loss_with_targets(&mm, b, perm, &targets, c, 1, false).unwrap().breakdown.total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.get(&name).map(|g| g.data()[i]).unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            assert!(err <= 1e-4, "{name}[{i}]: analytic {a} numeric {numeric}");
        }
    }
    assert!(worst <= 1e-4);
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..3 {
        let m = small_models(100 + seed);
        let b = random_batch(200 + seed, 5, 2, &m);
        let perm = permute_batch(5, &mut rng_from_seed(300 + seed)).unwrap();
        let c = LossCoefficients { c4: 0.5, ..coeffs() };
        finite_difference_check(&m, &b, &perm, &c);
        let c = LossCoefficients { bisim_dyn_distance: DynDistance::L2, ..c };
        finite_difference_check(&m, &b, &perm, &c);
    }
}

#[test]
fn bisim_only_touches_encoder() {
    let m = small_models(21);
    let b = random_batch(22, 6, 2, &m);
    let perm = [5, 4, 3, 2, 1, 0];
    let c = LossCoefficients { c1: 0.0, c2: 0.0, c3: 0.0, c4: 1.0, ..coeffs() };
    let out = total_model_loss(&m, &b, &perm, &c, 2).unwrap();
    let mut encoder_norm = 0.0;
    for (name, g) in &out.grads {
        let n: f64 = g.data().iter().map(|v| v * v).sum();
        if name.starts_with("encoder.") {
            encoder_norm += n;
        } else {
            assert_eq!(n, 0.0, "{name} received gradient");
        }
    }
    assert!(encoder_norm > 0.0);
}

#[test]
fn target_parameters_are_constants() {
    let m = small_models(31);
    let b = random_batch(32, 4, 1, &m);
    let perm = [3, 2, 1, 0];
    let base = total_model_loss(&m, &b, &perm, &coeffs(), 1).unwrap();
    let mut moved = m.clone();
    for (_, v) in moved.target.iter_mut() {
        for x in v.data_mut() {
            *x += 0.05;
        }
    }
    let after = total_model_loss(&moved, &b, &perm, &coeffs(), 1).unwrap();
    assert!((after.breakdown.total - base.breakdown.total).abs() > 1e-6);
    // Gradients are only ever reported for online parameters; the target
    // set never enters a tape as a differentiable leaf.
    assert!(after.grads.keys().all(|k| m.theta.params().contains(k)));
    assert!(moved.target.iter().all(|(k, v)| m.theta.params().get(k).unwrap() != v));
}

#[test]
fn permutation_contract() {
    assert!(matches!(permute_batch(1, &mut rng_from_seed(0)), Err(Error::Contract(_))));
    assert_eq!(permute_batch(9, &mut rng_from_seed(4)).unwrap(), permute_batch(9, &mut rng_from_seed(4)).unwrap());
    let mut identity = 0;
    let n = 10_000;
    for seed in 0..n {
        let p = permute_batch(2, &mut rng_from_seed(seed)).unwrap();
        if p == [0, 1] {
            identity += 1;
        } else {
            assert_eq!(p, [1, 0]);
        }
    }
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((identity as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma, "{identity}");
}

#[test]
fn bad_permutation_rejected() {
    let m = small_models(1);
    let b = random_batch(2, 3, 0, &m);
    for p in [vec![0, 0, 1], vec![0, 1], vec![0, 1, 3]] {
        assert!(total_model_loss(&m, &b, &p, &coeffs(), 1).is_err());
    }
}

#[test]
fn policy_loss_weights_steps() {
    let m = small_models(41);
    let b = random_batch(42, 5, 1, &m);
    let c = LossCoefficients { lambda: 0.5, ..coeffs() };
    let got = policy_loss(&m, &b, &c).unwrap().loss;
    let mut q = Vec::new();
    let mut rng = rng_from_seed(0);
    for k in 0..2 {
        let z = m.encode_array(&b.obs[k]).unwrap();
        let mut tgt = m.clone();
        tgt.theta.params_mut().iter_mut().for_each(|(name, v)| {
            if let Ok(t) = m.target.get(name) {
                *v = t.clone();
            }
        });
        let zbar = tgt.encode_array(&b.obs[k]).unwrap();
        let a = m.policy_action(&zbar, 0.0, &mut rng).unwrap();
        q.push(m.q_value_array(&z, &a, QMode::Avg).unwrap().mean());
    }
    let expected = -(q[0] + 0.5 * q[1]);
    assert!(rel(got, expected) < 1e-12, "{got} vs {expected}");
}

#[test]
fn constant_q_gives_zero_policy_gradient() {
    let mut m = small_models(43);
    for head in ["q1", "q2"] {
        let n = m.theta.params().get(&format!("{head}.l2.w")).unwrap().len();
        set_param(m.theta.params_mut(), &format!("{head}.l2.w"), &vec![0.0; n]);
    }
    let b = random_batch(44, 4, 2, &m);
    let out = policy_loss(&m, &b, &coeffs()).unwrap();
    assert!(out.grads.keys().all(|k| k.starts_with("policy.")));
    assert!(out.grads.values().all(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let m = small_models(45);
    let b = random_batch(46, 4, 2, &m);
    for mode in [QMode::Avg, QMode::Min] {
        let c = LossCoefficients { policy_q_mode: mode, ..coeffs() };
        let analytic = policy_loss(&m, &b, &c).unwrap().grads;
        let h = 1e-5;
        for (name, g) in &analytic {
            for i in 0..g.len() {
                let eval = |d: f64| {
                    let mut mm = m.clone();
                    mm.psi.params_mut().get_mut(name).unwrap().data_mut()[i] += d;
                    policy_loss(&mm, &b, &c).unwrap().loss
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = g.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err <= 1e-4, "{name}[{i}]: {a} vs {numeric}");
            }
        }
    }
}

#[test]
fn sequential_reference_agrees_on_first_step() {
    // With H = 0 the rollout never feeds a predicted latent forward, so
    // the reference and the per-step objective coincide when c4 = 0.
    let m = small_models(51);
    let b = random_batch(52, 4, 0, &m);
    let c = LossCoefficients { c4: 0.0, ..coeffs() };
    let seq = sequential_rollout_loss(&m, &b, &c).unwrap();
    let par = total_model_loss(&m, &b, &[1, 0, 3, 2], &c, 1).unwrap();
    assert!(rel(seq.breakdown.total, par.breakdown.total) < 1e-12);
    let b = random_batch(53, 4, 3, &m);
    let seq = sequential_rollout_loss(&m, &b, &c).unwrap();
    assert_eq!(seq.breakdown.per_step.len(), 4);
    assert!(seq.breakdown.total.is_finite());
}

#[test]
fn c4_table() {
    assert_eq!(c4_for_task("Cheetah"), Some(1e-3));
    assert_eq!(c4_for_task("cartpole"), Some(0.5));
    assert_eq!(c4_for_task("pendulum"), Some(0.01));
    assert_eq!(c4_for_task("nope"), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn terms_are_nonnegative(seed in 0u64..10_000, b in 2usize..6, h in 0usize..3) {
        let m = small_models(seed);
        let batch = random_batch(seed + 1, b, h, &m);
        let mut rng = rng_from_seed(seed + 2);
        let perm = permute_batch(b, &mut rng).unwrap();
        let c = LossCoefficients { lambda: rng.random_range(0.1..=1.0), ..coeffs() };
        let out = total_model_loss_value(&m, &batch, &perm, &c).unwrap();
        for t in &out.per_step {
            prop_assert!(t.reward >= 0.0 && t.value >= 0.0 && t.consistency >= 0.0 && t.bisim >= 0.0);
        }
        prop_assert!(out.total >= 0.0);
        let mut expect = 0.0;
        for (k, t) in out.per_step.iter().enumerate() {
            expect += c.lambda.powi(k as i32) * t.weighted(&c);
        }
        prop_assert!((expect - out.total).abs() <= 1e-12 * expect.abs().max(1.0));
    }
}

