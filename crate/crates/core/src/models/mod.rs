//! The five learned components (encoder, latent dynamics, reward, twin Q
//! heads, policy) and their slowly-moving target copies.

mod mlp;

pub use mlp::{Bind, Mlp, OutputActivation};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nncore::{Checkpoint, DenseArray, ParamSet, ParamStore, Tape, Var};
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// Bounds of the action space the models act in.
    #[serde(default)]
    pub action_low: Vec<f64>,
    #[serde(default)]
    pub action_high: Vec<f64>,
}

fn default_latent() -> usize {
    16
}

fn default_hidden() -> usize {
    64
}

impl ModelConfig {
    /// Desk-scale widths with actions in `[-1, 1]`.
    pub fn desk(state_dim: usize, action_dim: usize) -> Self {
        ModelConfig {
            state_dim,
            action_dim,
            latent_dim: default_latent(),
            hidden_dim: default_hidden(),
            action_low: vec![-1.0; action_dim],
            action_high: vec![1.0; action_dim],
        }
    }

    /// Widths used for the full-size experiments (hidden 512, latent 50).
    pub fn full_scale(state_dim: usize, action_dim: usize) -> Self {
        ModelConfig { latent_dim: 50, hidden_dim: 512, ..ModelConfig::desk(state_dim, action_dim) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config { key: "model".into(), msg: msg.into() });
        if self.state_dim == 0 || self.action_dim == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return bad("action bounds must have action_dim entries");
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return bad("action bounds must be finite with low < high");
        }
        Ok(())
    }
}

/// How the twin Q heads are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMode {
    Min,
    Head1,
    Head2,
    Avg,
}

/// Which parameter copy a computation reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Src {
    /// Online parameters, differentiated.
    Train,
    /// Online parameters, as constants.
    Online,
    /// Target parameters (always constants).
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet {
    pub cfg: ModelConfig,
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub reward: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub policy: Mlp,
    /// Encoder, dynamics, reward and Q parameters with Adam state.
    pub theta: ParamStore,
    /// Policy parameters with Adam state.
    pub psi: ParamStore,
    /// Target copies of encoder, dynamics and Q. Never optimized.
    pub target: ParamSet,
}

const TARGET_PREFIXES: [&str; 4] = ["encoder.", "dynamics.", "q1.", "q2."];

impl ModelSet {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (s, a, z, h) = (cfg.state_dim, cfg.action_dim, cfg.latent_dim, cfg.hidden_dim);
        let encoder = Mlp::new("encoder", vec![s, h, h, z], false, OutputActivation::Linear);
        let dynamics = Mlp::new("dynamics", vec![z + a, h, h, z], false, OutputActivation::Linear);
        let reward = Mlp::new("reward", vec![z + a, h, h, 1], false, OutputActivation::Linear);
        let q1 = Mlp::new("q1", vec![z + a, h, h, 1], true, OutputActivation::Linear);
        let q2 = Mlp::new("q2", vec![z + a, h, h, 1], true, OutputActivation::Linear);
        let policy = Mlp::new("policy", vec![z, h, h, a], false, OutputActivation::Tanh);

        let mut theta = ParamSet::new();
        for net in [&encoder, &dynamics, &reward, &q1, &q2] {
            net.init(rng, &mut theta);
        }
        let mut psi = ParamSet::new();
        policy.init(rng, &mut psi);
        let target = Self::target_subset(&theta);
        Ok(ModelSet {
            cfg,
            encoder,
            dynamics,
            reward,
            q1,
            q2,
            policy,
            theta: ParamStore::new(theta),
            psi: ParamStore::new(psi),
            target,
        })
    }

    fn target_subset(theta: &ParamSet) -> ParamSet {
        let mut t = ParamSet::new();
        for p in TARGET_PREFIXES {
            for (k, v) in theta.with_prefix(p).iter() {
                t.insert(k.clone(), v.clone());
            }
        }
        t
    }

    fn bind(&self, src: Src) -> Bind<'_> {
        match src {
            Src::Train => Bind::Train(self.theta.params()),
            Src::Online => Bind::Frozen(self.theta.params()),
            Src::Target => Bind::Frozen(&self.target),
        }
    }

    fn check_cols(&self, op: &'static str, tape: &Tape, v: Var, cols: usize) -> Result<()> {
        let got = tape.value(v).cols();
        if got != cols {
            return Err(shape_err(op, format!("expected {cols} columns, got {got}")));
        }
        Ok(())
    }

    /// `z = h(s)` for a batch of states.
    pub fn encode(&self, tape: &mut Tape, s: Var, src: Src) -> Result<Var> {
        self.check_cols("encode", tape, s, self.cfg.state_dim)?;
        self.encoder.forward(tape, self.bind(src), s)
    }

    fn za(&self, op: &'static str, tape: &mut Tape, z: Var, a: Var) -> Result<Var> {
        self.check_cols(op, tape, z, self.cfg.latent_dim)?;
        self.check_cols(op, tape, a, self.cfg.action_dim)?;
        tape.concat_cols(z, a)
    }

    /// `z' = d(z, a)`; deterministic latent transition.
    pub fn predict_next(&self, tape: &mut Tape, z: Var, a: Var, src: Src) -> Result<Var> {
        let x = self.za("predict_next", tape, z, a)?;
        self.dynamics.forward(tape, self.bind(src), x)
    }

    pub fn predict_reward(&self, tape: &mut Tape, z: Var, a: Var, src: Src) -> Result<Var> {
        if src == Src::Target {
            return Err(Error::Contract("the reward model has no target copy".into()));
        }
        let x = self.za("predict_reward", tape, z, a)?;
        self.reward.forward(tape, self.bind(src), x)
    }

    pub fn q_value(&self, tape: &mut Tape, z: Var, a: Var, mode: QMode, src: Src) -> Result<Var> {
        let x = self.za("q_value", tape, z, a)?;
        let bind = self.bind(src);
        match mode {
            QMode::Head1 => self.q1.forward(tape, bind, x),
            QMode::Head2 => self.q2.forward(tape, bind, x),
            QMode::Min => {
                let a1 = self.q1.forward(tape, bind, x)?;
                let a2 = self.q2.forward(tape, bind, x)?;
                tape.minimum(a1, a2)
            }
            QMode::Avg => {
                let a1 = self.q1.forward(tape, bind, x)?;
                let a2 = self.q2.forward(tape, bind, x)?;
                let s = tape.add(a1, a2)?;
                Ok(tape.scale(s, 0.5))
            }
        }
    }

    /// Deterministic policy output mapped into the action bounds.
    /// `train` selects whether the policy parameters receive gradients.
    pub fn policy_mean(&self, tape: &mut Tape, z: Var, train: bool) -> Result<Var> {
        self.check_cols("policy", tape, z, self.cfg.latent_dim)?;
        let bind = if train { Bind::Train(self.psi.params()) } else { Bind::Frozen(self.psi.params()) };
        let t = self.policy.forward(tape, bind, z)?;
        let (scale, shift): (Vec<f64>, Vec<f64>) = self
            .cfg
            .action_low
            .iter()
            .zip(&self.cfg.action_high)
            .map(|(l, h)| ((h - l) / 2.0, (h + l) / 2.0))
            .unzip();
        tape.col_affine(t, &scale, &shift)
    }

    fn check_array_cols(op: &'static str, x: &DenseArray, cols: usize) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != cols {
            return Err(shape_err(op, format!("expected {cols} columns, got {:?}", x.shape())));
        }
        Ok(())
    }

    fn za_array(&self, op: &'static str, z: &DenseArray, a: &DenseArray) -> Result<DenseArray> {
        Self::check_array_cols(op, z, self.cfg.latent_dim)?;
        Self::check_array_cols(op, a, self.cfg.action_dim)?;
        DenseArray::hcat(z, a)
    }

    fn params_of(&self, src: Src) -> &ParamSet {
        match src {
            Src::Train | Src::Online => self.theta.params(),
            Src::Target => &self.target,
        }
    }

    /// Encoder output as a plain array (no tape).
    pub fn encode_with(&self, s: &DenseArray, src: Src) -> Result<DenseArray> {
        Self::check_array_cols("encode", s, self.cfg.state_dim)?;
        self.encoder.eval(self.params_of(src), s)
    }

    pub fn encode_array(&self, s: &DenseArray) -> Result<DenseArray> {
        self.encode_with(s, Src::Online)
    }

    pub fn predict_next_with(&self, z: &DenseArray, a: &DenseArray, src: Src) -> Result<DenseArray> {
        let x = self.za_array("predict_next", z, a)?;
        self.dynamics.eval(self.params_of(src), &x)
    }

    pub fn predict_next_array(&self, z: &DenseArray, a: &DenseArray) -> Result<DenseArray> {
        self.predict_next_with(z, a, Src::Online)
    }

    pub fn predict_reward_array(&self, z: &DenseArray, a: &DenseArray) -> Result<DenseArray> {
        let x = self.za_array("predict_reward", z, a)?;
        self.reward.eval(self.theta.params(), &x)
    }

    /// Next latent and predicted reward from one shared input.
    pub fn step_array(&self, z: &DenseArray, a: &DenseArray) -> Result<(DenseArray, DenseArray)> {
        let x = self.za_array("step", z, a)?;
        let p = self.theta.params();
        Ok((self.dynamics.eval(p, &x)?, self.reward.eval(p, &x)?))
    }

    pub fn q_value_with(&self, z: &DenseArray, a: &DenseArray, mode: QMode, src: Src) -> Result<DenseArray> {
        let x = self.za_array("q_value", z, a)?;
        let p = self.params_of(src);
        let combine = |f: fn(f64, f64) -> f64| -> Result<DenseArray> {
            let q1 = self.q1.eval(p, &x)?;
            let q2 = self.q2.eval(p, &x)?;
            let data = q1.data().iter().zip(q2.data()).map(|(a, b)| f(*a, *b)).collect();
            Ok(DenseArray::from_raw(q1.shape().to_vec(), data))
        };
        match mode {
            QMode::Head1 => self.q1.eval(p, &x),
            QMode::Head2 => self.q2.eval(p, &x),
            QMode::Min => combine(f64::min),
            QMode::Avg => combine(|a, b| (a + b) * 0.5),
        }
    }

    pub fn q_value_array(&self, z: &DenseArray, a: &DenseArray, mode: QMode) -> Result<DenseArray> {
        self.q_value_with(z, a, mode, Src::Online)
    }

    /// Deterministic policy action in the action bounds (no tape).
    pub fn policy_mean_array(&self, z: &DenseArray) -> Result<DenseArray> {
        Self::check_array_cols("policy", z, self.cfg.latent_dim)?;
        let mut t = self.policy.eval(self.psi.params(), z)?;
        let ad = self.cfg.action_dim;
        let (lo, hi) = (&self.cfg.action_low, &self.cfg.action_high);
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            let j = k % ad;
            *v = *v * ((hi[j] - lo[j]) / 2.0) + (hi[j] + lo[j]) / 2.0;
        }
        Ok(t)
    }

    /// Policy action with optional Gaussian exploration noise, clipped to
    /// the action bounds.
    pub fn policy_action(&self, z: &DenseArray, noise_std: f64, rng: &mut Rng) -> Result<DenseArray> {
        if !(noise_std >= 0.0) {
            return Err(Error::Contract(format!("noise_std must be >= 0, got {noise_std}")));
        }
        let mut out = self.policy_mean_array(z)?;
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("valid std");
            for v in out.data_mut() {
                *v += normal.sample(rng);
            }
        }
        self.clip_actions(&mut out);
        Ok(out)
    }

    pub fn clip_actions(&self, a: &mut DenseArray) {
        let ad = self.cfg.action_dim;
        for (k, v) in a.data_mut().iter_mut().enumerate() {
            *v = v.clamp(self.cfg.action_low[k % ad], self.cfg.action_high[k % ad]);
        }
    }

    /// EMA of the target copies: when `step % every == 0`,
    /// `target <- zeta * target + (1 - zeta) * online`. Returns whether the
    /// update was applied.
    pub fn update_targets(&mut self, zeta: f64, every: u64, step: u64) -> Result<bool> {
        if !(0.0..1.0).contains(&zeta) || every == 0 {
            return Err(Error::Contract(format!("bad target schedule zeta={zeta} every={every}")));
        }
        if step % every != 0 {
            return Ok(false);
        }
        let names: Vec<String> = self.target.names().cloned().collect();
        for name in names {
            let online = self.theta.params().get(&name)?.data().to_vec();
            let t = self.target.get_mut(&name)?.data_mut();
            for (tv, ov) in t.iter_mut().zip(&online) {
                *tv = zeta * *tv + (1.0 - zeta) * ov;
            }
        }
        Ok(true)
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.stores.insert("theta".into(), self.theta.clone());
        ck.stores.insert("psi".into(), self.psi.clone());
        ck.sets.insert("target".into(), self.target.clone());
        ck.meta.insert("model_config".into(), serde_json::to_string(&self.cfg)?);
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| Error::Contract(format!("checkpoint lacks `{what}`"));
        let cfg: ModelConfig =
            serde_json::from_str(ck.meta.get("model_config").ok_or_else(|| missing("model_config"))?)?;
        let mut m = ModelSet::new(cfg, &mut crate::rng_from_seed(0))?;
        let theta = ck.stores.get("theta").ok_or_else(|| missing("theta"))?.clone();
        let psi = ck.stores.get("psi").ok_or_else(|| missing("psi"))?.clone();
        let target = ck.sets.get("target").ok_or_else(|| missing("target"))?.clone();
        for (fresh, loaded) in [(m.theta.params(), theta.params()), (m.psi.params(), psi.params()), (&m.target, &target)] {
            let same = fresh.len() == loaded.len()
                && fresh.iter().all(|(k, v)| loaded.get(k).map(|l| l.shape() == v.shape()).unwrap_or(false));
            if !same {
                return Err(Error::Contract("checkpoint parameter layout does not match model config".into()));
            }
        }
        m.theta = theta;
        m.psi = psi;
        m.target = target;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn small() -> ModelSet {
        let mut cfg = ModelConfig::desk(3, 2);
        cfg.hidden_dim = 8;
        cfg.latent_dim = 4;
        cfg.action_low = vec![-2.0, -0.5];
        cfg.action_high = vec![2.0, 1.5];
        ModelSet::new(cfg, &mut rng_from_seed(3)).unwrap()
    }

    fn states() -> DenseArray {
        DenseArray::from_rows(&[vec![0.1, 0.2, -0.3], vec![1.5, -2.0, 0.7], vec![0.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_rowwise() {
        let m = small();
        let s = states();
        let a = m.encode_array(&s).unwrap();
        assert_eq!(a, m.encode_array(&s).unwrap());
        assert_eq!(a.shape(), &[3, 4]);
        let single = m.encode_array(&s.select_rows(&[1])).unwrap();
        assert_eq!(single.row(0), a.row(1));
    }

    #[test]
    fn encode_dimension_mismatch() {
        let m = small();
        assert!(m.encode_array(&DenseArray::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn dynamics_and_reward_shapes() {
        let m = small();
        let z = m.encode_array(&states()).unwrap();
        let a = DenseArray::from_rows(&[vec![0.1, 0.0], vec![-1.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let n = m.predict_next_array(&z, &a).unwrap();
        assert_eq!(n.shape(), &[3, 4]);
        assert_eq!(n, m.predict_next_array(&z, &a).unwrap());
        let r = m.predict_reward_array(&z, &a).unwrap();
        assert_eq!(r.shape(), &[3, 1]);
    }

    #[test]
    fn q_min_with_equal_heads() {
        let mut m = small();
        for name in m.q1.dims.windows(2).enumerate().flat_map(|(i, _)| [m.q1.weight_name(i), m.q1.bias_name(i)]).collect::<Vec<_>>() {
            let v = m.theta.params().get(&name).unwrap().clone();
            *m.theta.params_mut().get_mut(&name.replacen("q1", "q2", 1)).unwrap() = v;
        }
        let z = m.encode_array(&states()).unwrap();
        let a = DenseArray::zeros(&[3, 2]);
        let h1 = m.q_value_array(&z, &a, QMode::Head1).unwrap();
        assert_eq!(m.q_value_array(&z, &a, QMode::Min).unwrap(), h1);
        assert_eq!(m.q_value_array(&z, &a, QMode::Avg).unwrap(), h1);
    }

    #[test]
    fn policy_bounds_and_noise_reproducible() {
        let m = small();
        let z = DenseArray::from_rows(&[vec![100.0, -50.0, 3.0, 0.0], vec![-1e3, 1e3, 0.0, 2.0]]).unwrap();
        let mut r = rng_from_seed(0);
        let a0 = m.policy_action(&z, 0.0, &mut r).unwrap();
        assert_eq!(a0, m.policy_action(&z, 0.0, &mut r).unwrap());
        let n1 = m.policy_action(&z, 0.5, &mut rng_from_seed(7)).unwrap();
        let n2 = m.policy_action(&z, 0.5, &mut rng_from_seed(7)).unwrap();
        assert_eq!(n1, n2);
        for a in [&a0, &n1] {
            for i in 0..2 {
                assert!((-2.0..=2.0).contains(&a.get(i, 0)));
                assert!((-0.5..=1.5).contains(&a.get(i, 1)));
            }
        }
        assert!(m.policy_action(&z, -1.0, &mut r).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut m = small();
        // targets start equal to online: unchanged by an update
        let before = m.target.clone();
        m.update_targets(0.99, 2, 4).unwrap();
        assert!(m.target.max_abs_diff(&before) < 1e-15);

        let name = "encoder.l0.b".to_string();
        m.target.get_mut(&name).unwrap().data_mut().fill(0.0);
        m.theta.params_mut().get_mut(&name).unwrap().data_mut().fill(1.0);
        assert!(!m.update_targets(0.99, 2, 3).unwrap());
        assert_eq!(m.target.get(&name).unwrap().data()[0], 0.0);
        assert!(m.update_targets(0.99, 2, 2).unwrap());
        assert!((m.target.get(&name).unwrap().data()[0] - 0.01).abs() < 1e-15);

        m.update_targets(0.0, 1, 1).unwrap();
        assert_eq!(m.target.max_abs_diff(m.theta.params()), 0.0);
    }

    #[test]
    fn ema_drift_bound() {
        let mut m = small();
        for (i, (_, v)) in m.theta.params_mut().iter_mut().enumerate() {
            for (k, x) in v.data_mut().iter_mut().enumerate() {
                *x += ((i * 31 + k) % 7) as f64 * 0.1 - 0.3;
            }
        }
        let old = m.target.clone();
        let gap = old.max_abs_diff(m.theta.params());
        m.update_targets(0.9, 1, 1).unwrap();
        assert!(m.target.max_abs_diff(&old) <= 0.1 * gap * (1.0 + 1e-12));
    }

    #[test]
    fn targets_have_no_optimizer_state() {
        let m = small();
        assert!(!m.target.names().any(|n| n.starts_with("reward.") || n.starts_with("policy.")));
        assert!(m.target.names().all(|n| m.theta.params().contains(n)));
        assert_eq!(m.theta.params().len(), m.theta.first_moment().len());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = small();
        let mut ck = Checkpoint::default();
        m.write_checkpoint(&mut ck).unwrap();
        let back = ModelSet::from_checkpoint(&Checkpoint::from_json(&ck.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn array_paths_match_tape() {
        let m = ModelSet::new(ModelConfig { action_low: vec![-2.0, 0.0], action_high: vec![1.0, 3.0], ..ModelConfig::desk(3, 2) }, &mut rng_from_seed(8)).unwrap();
        let s = DenseArray::from_rows(&[vec![0.1, 0.2, -0.3], vec![1.0, -2.0, 0.5]]).unwrap();
        let a = DenseArray::from_rows(&[vec![0.5, 2.0], vec![-1.5, 0.1]]).unwrap();
        let mut t = Tape::new();
        let (sv, av) = (t.constant(s.clone()), t.constant(a.clone()));
        let z = m.encode(&mut t, sv, Src::Online).unwrap();
        let zt = m.encode(&mut t, sv, Src::Target).unwrap();
        let n = m.predict_next(&mut t, z, av, Src::Online).unwrap();
        let r = m.predict_reward(&mut t, z, av, Src::Online).unwrap();
        let pi = m.policy_mean(&mut t, z, false).unwrap();
        let za = m.encode_array(&s).unwrap();
        assert_eq!(t.value(z), &za);
        assert_eq!(t.value(zt), &m.encode_with(&s, Src::Target).unwrap());
        assert_eq!(t.value(n), &m.predict_next_array(&za, &a).unwrap());
        assert_eq!(t.value(r), &m.predict_reward_array(&za, &a).unwrap());
        assert_eq!(t.value(pi), &m.policy_mean_array(&za).unwrap());
        for mode in [QMode::Min, QMode::Avg, QMode::Head1, QMode::Head2] {
            let q = m.q_value(&mut t, z, av, mode, Src::Target).unwrap();
            assert_eq!(t.value(q), &m.q_value_with(&za, &a, mode, Src::Target).unwrap());
        }
    }
}
