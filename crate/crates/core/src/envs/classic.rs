use std::f64::consts::PI;

use rand::Rng as _;

use super::{clip_action, Env, EnvSpec, StepOutcome};
use crate::error::{Error, Result};
use crate::{rng_from_seed, Rng};

const G: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;

fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// One pendulum step on the observation `(cos θ, sin θ, θ̇)` with `θ = 0`
/// upright. Returns the next observation, the reward of the pre-step state
/// and whether the torque was clipped.
pub fn pendulum_step(obs: &[f64], torque: f64) -> Result<(Vec<f64>, f64, bool)> {
    if obs.len() != 3 {
        return Err(Error::Contract(format!("pendulum observation has {} entries", obs.len())));
    }
    let (c, s, thdot) = (obs[0], obs[1], obs[2]);
    if ((c * c + s * s) - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("pendulum state off the unit circle: cos={c}, sin={s}")));
    }
    let (u, clipped) = clip_action(&[torque], &[-MAX_TORQUE], &[MAX_TORQUE])?;
    let u = u[0];
    let th = s.atan2(c);
    let reward = -(wrap_angle(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u);
    let new_thdot = (thdot + (3.0 * G / (2.0 * LENGTH) * th.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u) * DT)
        .clamp(-MAX_SPEED, MAX_SPEED);
    let new_th = th + new_thdot * DT;
    Ok((vec![new_th.cos(), new_th.sin(), new_thdot], reward, clipped))
}

/// Torque-limited swing-up. Episodes start at a uniform angle and
/// angular velocity in `[-1, 1]` and last 200 steps.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    obs: Vec<f64>,
    t: usize,
    rng: Rng,
}

impl Pendulum {
    pub fn new(seed: u64) -> Self {
        let spec = EnvSpec {
            name: "pendulum".into(),
            state_dim: 3,
            action_dim: 1,
            action_low: vec![-MAX_TORQUE],
            action_high: vec![MAX_TORQUE],
            episode_length: 200,
            dt: DT,
        };
        Pendulum { spec, obs: vec![1.0, 0.0, 0.0], t: 0, rng: rng_from_seed(seed) }
    }

    /// Put the pendulum at angle `th` (0 upright) and velocity `thdot`.
    pub fn set_state(&mut self, th: f64, thdot: f64) {
        self.obs = vec![th.cos(), th.sin(), thdot];
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        let th = self.rng.random_range(-PI..PI);
        let thdot = self.rng.random_range(-1.0..1.0);
        self.set_state(th, thdot);
        self.t = 0;
        self.obs.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 1 {
            return Err(Error::Contract(format!("pendulum takes 1 action, got {}", action.len())));
        }
        let (obs, reward, clipped) = pendulum_step(&self.obs, action[0])?;
        self.obs = obs;
        self.t += 1;
        Ok(StepOutcome { obs: self.obs.clone(), reward, done: self.t >= self.spec.episode_length, clipped })
    }
}

const PM_DAMPING: f64 = 0.05;

/// Damped planar double integrator, state `(x, y, ẋ, ẏ)`. Semi-implicit
/// Euler; reward is the negative distance of the pre-step position to the
/// origin.
pub fn pointmass_step(state: &[f64], force: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
    if state.len() != 4 {
        return Err(Error::Contract(format!("point-mass state has {} entries", state.len())));
    }
    let (f, clipped) = clip_action(force, &[-1.0, -1.0], &[1.0, 1.0])?;
    let reward = -(state[0] * state[0] + state[1] * state[1]).sqrt();
    let vx = state[2] + DT * (f[0] - PM_DAMPING * state[2]);
    let vy = state[3] + DT * (f[1] - PM_DAMPING * state[3]);
    Ok((vec![state[0] + DT * vx, state[1] + DT * vy, vx, vy], reward, clipped))
}

#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    state: Vec<f64>,
    t: usize,
    rng: Rng,
}

impl PointMass {
    pub fn new(seed: u64) -> Self {
        let spec = EnvSpec {
            name: "pointmass".into(),
            state_dim: 4,
            action_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            episode_length: 200,
            dt: DT,
        };
        PointMass { spec, state: vec![0.0; 4], t: 0, rng: rng_from_seed(seed) }
    }

    pub fn set_state(&mut self, state: &[f64]) {
        self.state = state.to_vec();
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        let x = self.rng.random_range(-1.0..1.0);
        let y = self.rng.random_range(-1.0..1.0);
        self.state = vec![x, y, 0.0, 0.0];
        self.t = 0;
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let (state, reward, clipped) = pointmass_step(&self.state, action)?;
        self.state = state;
        self.t += 1;
        Ok(StepOutcome { obs: self.state.clone(), reward, done: self.t >= self.spec.episode_length, clipped })
    }
}
