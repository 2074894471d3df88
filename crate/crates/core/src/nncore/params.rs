use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::DenseArray;
use crate::error::{shape_err, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Named parameter arrays. Iteration order is the sorted name order, which
/// keeps every reduction over parameters deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(BTreeMap<String, DenseArray>);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.0.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        self.0.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Subset of parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(self.0.iter().map(|(k, v)| (k.clone(), DenseArray::zeros(v.shape()))).collect())
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(DenseArray::len).sum()
    }

    /// Largest absolute entrywise difference over shared names.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.0
            .iter()
            .filter_map(|(k, a)| other.0.get(k).map(|b| (a, b)))
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Global L2 norm over a set of named gradients.
pub fn grad_norm(grads: &BTreeMap<String, DenseArray>) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescale gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, DenseArray>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Parameters plus Adam moment estimates and step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: ParamSet,
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl ParamStore {
    pub fn new(params: ParamSet) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        ParamStore { params, m, v, t: 0 }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }

    /// One Adam update with bias correction. Every gradient must name a
    /// stored parameter of identical shape; a non-finite gradient rejects
    /// the whole step and leaves the store untouched.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, DenseArray>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = self.params.get(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err(
                    "adam_step",
                    format!("gradient `{name}` {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { context: format!("gradient of `{name}`") });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            }
            let (m, v) = (self.m.get(name)?.data().to_vec(), self.v.get(name)?.data().to_vec());
            let p = self.params.get_mut(name)?.data_mut();
            for k in 0..p.len() {
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
