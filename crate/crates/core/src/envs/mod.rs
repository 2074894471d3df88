//! Analytic control tasks, an action-independent distractor wrapper and
//! finite tabular MDPs.

mod classic;
mod distractor;
mod tabular;

pub use classic::{pendulum_step, pointmass_step, Pendulum, PointMass};
pub use distractor::{DistractorConfig, DistractorProcess, WithDistractors};
pub use tabular::{random_mdp, TabularMdp};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    /// Observation width.
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub episode_length: usize,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode reached its fixed length.
    pub done: bool,
    /// The action was outside the bounds and got clipped.
    pub clipped: bool,
}

/// An episodic environment. Every instance owns its randomness, so equal
/// seeds give equal trajectories.
pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    /// Start a new episode and return the first observation.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
}

/// Clip `action` into the bounds; returns whether anything changed.
pub fn clip_action(action: &[f64], low: &[f64], high: &[f64]) -> Result<(Vec<f64>, bool)> {
    if action.len() != low.len() {
        return Err(Error::Contract(format!("action has {} entries, expected {}", action.len(), low.len())));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite { context: "action".into() });
    }
    let out: Vec<f64> = action.iter().zip(low.iter().zip(high)).map(|(a, (l, h))| a.clamp(*l, *h)).collect();
    let clipped = out != action;
    Ok((out, clipped))
}

/// Build a task by name (`pendulum` or `pointmass`), optionally wrapped
/// with distractor dimensions.
pub fn make_env(name: &str, distractors: &DistractorConfig, seed: u64) -> Result<Box<dyn Env>> {
    let base: Box<dyn Env> = match name {
        "pendulum" => Box::new(Pendulum::new(seed)),
        "pointmass" => Box::new(PointMass::new(seed)),
        other => return Err(Error::Config { key: "env.name".into(), msg: format!("unknown task `{other}`") }),
    };
    if distractors.count == 0 {
        return Ok(base);
    }
    // Distractor noise uses its own stream, decorrelated from the task seed.
    Ok(Box::new(WithDistractors::new(base, distractors.clone(), seed ^ 0x5EED_D157_AC70_u64)?))
}
