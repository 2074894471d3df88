use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng_from_seed;

/// Finite MDP with rewards in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `r[s * n_actions + a]`.
    pub r: Vec<f64>,
    /// `p[(s * n_actions + a) * n_states + s']`.
    pub p: Vec<f64>,
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64, r: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        let m = TabularMdp { n_states, n_actions, gamma, r, p };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, a) = (self.n_states, self.n_actions);
        if n == 0 || a == 0 {
            return Err(Error::Contract("MDP needs at least one state and one action".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Contract(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if self.r.len() != n * a || self.p.len() != n * a * n {
            return Err(Error::Contract(format!("table sizes r={} p={} for {n} states, {a} actions", self.r.len(), self.p.len())));
        }
        if let Some((i, v)) = self.r.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("reward {v} at (s={}, a={}) outside [0, 1]", i / a, i % a)));
        }
        for sa in 0..n * a {
            let row = self.row(sa / a, sa % a);
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("transition row (s={}, a={}) is not a distribution", sa / a, sa % a)));
            }
        }
        Ok(())
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.n_actions + a]
    }

    /// `P(· | s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let k = (s * self.n_actions + a) * self.n_states;
        &self.p[k..k + self.n_states]
    }

    /// Parse the text format: a header `n_states n_actions gamma`, then
    /// `n_states` reward rows of `n_actions` values, then
    /// `n_states * n_actions` transition rows of `n_states` values ordered
    /// by state, then action. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let eof = text.lines().count() + 1;
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let err = |line: usize, msg: String| Error::Parse { line, msg };
        let (hl, header) = lines.next().ok_or_else(|| err(1, "empty MDP file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 {
            return Err(err(hl, "header must be `n_states n_actions gamma`".into()));
        }
        let n: usize = h[0].parse().map_err(|_| err(hl, format!("bad state count `{}`", h[0])))?;
        let a: usize = h[1].parse().map_err(|_| err(hl, format!("bad action count `{}`", h[1])))?;
        let gamma: f64 = h[2].parse().map_err(|_| err(hl, format!("bad discount `{}`", h[2])))?;

        let mut read_row = |what: String, width: usize| -> Result<(usize, Vec<f64>)> {
            let (ln, l) = lines.next().ok_or_else(|| err(eof, format!("missing {what}")))?;
            let vals = l
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| err(ln, format!("{what}: bad number `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != width {
                return Err(err(ln, format!("{what}: expected {width} values, found {}", vals.len())));
            }
            Ok((ln, vals))
        };
        let mut r = Vec::with_capacity(n * a);
        for s in 0..n {
            let (ln, row) = read_row(format!("reward row for state {s}"), a)?;
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(err(ln, format!("reward row for state {s}: {v} outside [0, 1]")));
            }
            r.extend(row);
        }
        let mut p = Vec::with_capacity(n * a * n);
        for s in 0..n {
            for act in 0..a {
                let what = format!("transition row (state {s}, action {act})");
                let (ln, row) = read_row(what.clone(), n)?;
                if row.iter().any(|v| *v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(err(ln, format!("{what}: not a probability distribution")));
                }
                // Renormalize only rows outside the 1e-12 invariant.
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    p.extend(row.iter().map(|v| v / total));
                } else {
                    p.extend(row);
                }
            }
        }
        if let Some((ln, _)) = lines.next() {
            return Err(err(ln, "unexpected trailing data".into()));
        }
        TabularMdp::new(n, a, gamma, r, p).map_err(|e| err(hl, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.n_states, self.n_actions, self.gamma);
        let fmt_row = |out: &mut String, row: &[f64]| {
            let parts: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", parts.join(" "));
        };
        for s in 0..self.n_states {
            fmt_row(&mut out, &self.r[s * self.n_actions..(s + 1) * self.n_actions]);
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                fmt_row(&mut out, self.row(s, a));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Random MDP: every `(s, a)` gets `⌈sparsity · n⌉` distinct successors
/// with flat-Dirichlet weights, rewards are uniform in `[0, 1]`.
pub fn random_mdp(n_states: usize, n_actions: usize, sparsity: f64, gamma: f64, seed: u64) -> Result<TabularMdp> {
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::Contract(format!("sparsity {sparsity} outside (0, 1]")));
    }
    if n_states == 0 || n_actions == 0 {
        return Err(Error::Contract("MDP needs at least one state and one action".into()));
    }
    let mut rng = rng_from_seed(seed);
    let k = ((sparsity * n_states as f64).ceil() as usize).clamp(1, n_states);
    let r: Vec<f64> = (0..n_states * n_actions).map(|_| rng.random_range(0.0..=1.0)).collect();
    let mut p = vec![0.0; n_states * n_actions * n_states];
    for sa in 0..n_states * n_actions {
        let support = sample(&mut rng, n_states, k);
        let w: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = w.iter().sum();
        for (j, s2) in support.iter().enumerate() {
            p[sa * n_states + s2] = w[j] / total;
        }
        // Absorb the rounding residue so rows sum to 1 within 1e-12.
        let row = &mut p[sa * n_states..(sa + 1) * n_states];
        let residue = 1.0 - row.iter().sum::<f64>();
        let top = (0..n_states).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        row[top] += residue;
    }
    TabularMdp::new(n_states, n_actions, gamma, r, p)
}
