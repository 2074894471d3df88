use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Env, EnvSpec, StepOutcome};
use crate::error::{Error, Result};
use crate::{rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorProcess {
    /// Fresh `N(0, σ²)` draws every step.
    IidGauss,
    /// `d ← ρ·d + σ·ε`.
    Ar1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistractorConfig {
    pub count: usize,
    pub process: DistractorProcess,
    pub rho: f64,
    pub noise_std: f64,
}

impl Default for DistractorConfig {
    fn default() -> Self {
        DistractorConfig { count: 0, process: DistractorProcess::Ar1, rho: 0.9, noise_std: 1.0 }
    }
}

impl DistractorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Config { key: "env.distractors.rho".into(), msg: "need |rho| < 1".into() });
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config { key: "env.distractors.noise_std".into(), msg: "must be >= 0".into() });
        }
        Ok(())
    }

    /// Stationary standard deviation of one distractor coordinate.
    pub fn stationary_std(&self) -> f64 {
        match self.process {
            DistractorProcess::IidGauss => self.noise_std,
            DistractorProcess::Ar1 => self.noise_std / (1.0 - self.rho * self.rho).sqrt(),
        }
    }
}

/// Appends `count` coordinates that evolve independently of the actions and
/// of the wrapped task. Their randomness comes from a separate stream.
pub struct WithDistractors {
    inner: Box<dyn Env>,
    cfg: DistractorConfig,
    spec: EnvSpec,
    d: Vec<f64>,
    rng: Rng,
}

impl WithDistractors {
    pub fn new(inner: Box<dyn Env>, cfg: DistractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut spec = inner.spec().clone();
        spec.state_dim += cfg.count;
        spec.name = format!("{}+{}d", spec.name, cfg.count);
        Ok(WithDistractors { inner, d: vec![0.0; cfg.count], cfg, spec, rng: rng_from_seed(seed) })
    }

    pub fn distractors(&self) -> &[f64] {
        &self.d
    }

    pub(crate) fn advance(&mut self) {
        let (rho, sd) = match self.cfg.process {
            DistractorProcess::IidGauss => (0.0, self.cfg.noise_std),
            DistractorProcess::Ar1 => (self.cfg.rho, self.cfg.noise_std),
        };
        for v in &mut self.d {
            let e: f64 = StandardNormal.sample(&mut self.rng);
            *v = rho * *v + sd * e;
        }
    }

    fn observe(&self, base: Vec<f64>) -> Vec<f64> {
        let mut obs = base;
        obs.extend_from_slice(&self.d);
        obs
    }
}

impl Env for WithDistractors {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        // Start from the stationary distribution.
        let sd = self.cfg.stationary_std();
        for v in &mut self.d {
            let e: f64 = StandardNormal.sample(&mut self.rng);
            *v = sd * e;
        }
        let base = self.inner.reset();
        self.observe(base)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let out = self.inner.step(action)?;
        self.advance();
        Ok(StepOutcome { obs: self.observe(out.obs), ..out })
    }
}
