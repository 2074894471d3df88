//! Exact bisimulation metrics on finite MDPs, epsilon-aggregation and
//! numerical checks of the value, return and reward bounds that the
//! aggregation is supposed to satisfy.

mod transport;
mod verify;


pub use transport::{transport, w1};
pub use verify::{verify_all, BoundReport, BoundSetup, CheckRow, RewardBoundReport, ValueBoundReport, ReturnBoundReport};

use crate::envs::TabularMdp;
use crate::error::{Error, Result};

/// Default fixed-point tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Hard cap on fixed-point sweeps.
const MAX_SWEEPS: usize = 100_000;

/// Symmetric `n × n` distance table, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMatrix {
    pub n: usize,
    pub d: Vec<f64>,
}

impl MetricMatrix {
    pub fn zeros(n: usize) -> Self {
        MetricMatrix { n, d: vec![0.0; n * n] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn diameter(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    /// Largest triangle-inequality excess `d(i,k) - d(i,j) - d(j,k)`.
    pub fn triangle_excess(&self) -> f64 {
        let n = self.n;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    worst = worst.max(self.get(i, k) - self.get(i, j) - self.get(j, k));
                }
            }
        }
        worst
    }

    /// Zero diagonal, exact symmetry, non-negativity and the triangle
    /// inequality within `tol`.
    pub fn check_pseudometric(&self, tol: f64) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if self.get(i, i) != 0.0 {
                return Err(Error::Contract(format!("d[{i},{i}] = {}", self.get(i, i))));
            }
            for j in 0..n {
                let v = self.get(i, j);
                if !(v >= 0.0) || v != self.get(j, i) {
                    return Err(Error::Contract(format!("d[{i},{j}] = {v}, d[{j},{i}] = {}", self.get(j, i))));
                }
            }
        }
        let excess = self.triangle_excess();
        if excess > tol {
            return Err(Error::Contract(format!("triangle inequality violated by {excess:e}")));
        }
        Ok(())
    }
}

/// Reward and transition weights of the fixed-point map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BisimWeights {
    pub reward: f64,
    pub transition: f64,
}

impl BisimWeights {
    /// `(1, γ)`.
    pub fn discounted(gamma: f64) -> Self {
        BisimWeights { reward: 1.0, transition: gamma }
    }

    /// `(1 - c, c)`.
    pub fn convex(c: f64) -> Self {
        BisimWeights { reward: 1.0 - c, transition: c }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.transition > 0.0 && self.transition < 1.0) {
            return Err(Error::Contract(format!("transition weight {} outside (0, 1); the map is not a contraction", self.transition)));
        }
        if !(self.reward >= 0.0 && self.reward.is_finite()) {
            return Err(Error::Contract(format!("reward weight {} must be finite and non-negative", self.reward)));
        }
        Ok(())
    }
}

/// Fixed point plus convergence bookkeeping.
#[derive(Clone, Debug)]
pub struct MetricResult {
    pub metric: MetricMatrix,
    pub iterations: usize,
    /// Sup-norm change of every sweep, in order.
    pub changes: Vec<f64>,
}

/// Stop once `change · w / (1 - w)` bounds the remaining error by `tol`,
/// and the raw change itself is below `tol`.
fn converged(change: f64, w: f64, tol: f64) -> bool {
    change < tol && change * w / (1.0 - w) <= tol
}

/// Iterate `d ← F(d)` from `d ≡ 0`. `pair(d, i, j)` evaluates `F(d)[i,j]`.
fn fixed_point(n: usize, w: f64, tol: f64, mut pair: impl FnMut(&MetricMatrix, usize, usize) -> f64) -> Result<MetricResult> {
    if !(tol > 0.0) {
        return Err(Error::Contract(format!("tolerance {tol} must be positive")));
    }
    let mut d = MetricMatrix::zeros(n);
    let mut changes = Vec::new();
    for sweep in 1..=MAX_SWEEPS {
        let mut next = MetricMatrix::zeros(n);
        let mut change: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let v = pair(&d, i, j);
                next.d[i * n + j] = v;
                next.d[j * n + i] = v;
                change = change.max((v - d.get(i, j)).abs());
            }
        }
        d = next;
        changes.push(change);
        if converged(change, w, tol) {
            return Ok(MetricResult { metric: d, iterations: sweep, changes });
        }
    }
    Err(Error::Contract(format!("metric iteration did not converge in {MAX_SWEEPS} sweeps")))
}

/// `W1` with ground cost `cost` between two rows already known to be
/// distributions.
fn w1_rows(p: &[f64], q: &[f64], cost: &MetricMatrix) -> f64 {
    let n = cost.n;
    if p == q {
        return 0.0;
    }
    let src: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
    let dst: Vec<usize> = (0..n).filter(|&j| q[j] > 0.0).collect();
    let c: Vec<f64> = src.iter().flat_map(|&i| dst.iter().map(move |&j| cost.get(i, j))).collect();
    let a: Vec<f64> = src.iter().map(|&i| p[i]).collect();
    let b: Vec<f64> = dst.iter().map(|&j| q[j]).collect();
    transport(&a, &b, &c).0
}

/// Check that `policy` is an `n_states × n_actions` row-stochastic table.
pub fn validate_policy(mdp: &TabularMdp, policy: &[f64]) -> Result<()> {
    let a = mdp.n_actions;
    if policy.len() != mdp.n_states * a {
        return Err(Error::Contract(format!("policy has {} entries, expected {}", policy.len(), mdp.n_states * a)));
    }
    for (s, row) in policy.chunks(a).enumerate() {
        if row.iter().any(|v| !(*v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("policy row {s} is not a distribution")));
        }
    }
    Ok(())
}

/// Deterministic policy as a one-hot table.
pub fn one_hot_policy(actions: &[usize], n_actions: usize) -> Vec<f64> {
    let mut t = vec![0.0; actions.len() * n_actions];
    for (s, &a) in actions.iter().enumerate() {
        t[s * n_actions + a] = 1.0;
    }
    t
}

/// `r^π` and `P^π` for a stochastic policy table.
pub fn marginalize(mdp: &TabularMdp, policy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, na) = (mdp.n_states, mdp.n_actions);
    let mut r = vec![0.0; n];
    let mut p = vec![0.0; n * n];
    for s in 0..n {
        for a in 0..na {
            let w = policy[s * na + a];
            if w == 0.0 {
                continue;
            }
            r[s] += w * mdp.reward(s, a);
            for (t, v) in mdp.row(s, a).iter().enumerate() {
                p[s * n + t] += w * v;
            }
        }
    }
    (r, p)
}

/// Least fixed point of the on-policy metric
/// `d(i,j) = w_r |r^π_i - r^π_j| + w_t W1(d)(P^π_i, P^π_j)`.
pub fn pi_bisim_metric(mdp: &TabularMdp, policy: &[f64], weights: BisimWeights, tol: f64) -> Result<MetricResult> {
    weights.validate()?;
    validate_policy(mdp, policy)?;
    let n = mdp.n_states;
    let (r, p) = marginalize(mdp, policy);
    fixed_point(n, weights.transition, tol, |d, i, j| {
        weights.reward * (r[i] - r[j]).abs() + weights.transition * w1_rows(&p[i * n..(i + 1) * n], &p[j * n..(j + 1) * n], d)
    })
}

/// Least fixed point of
/// `d(i,j) = max_a (1-c) |R(i,a) - R(j,a)| + c W1(d)(P(·|i,a), P(·|j,a))`.
pub fn ferns_bisim_metric(mdp: &TabularMdp, c: f64, tol: f64) -> Result<MetricResult> {
    let weights = BisimWeights::convex(c);
    weights.validate()?;
    if let Some(v) = mdp.r.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("reward {v} outside [0, 1]")));
    }
    fixed_point(mdp.n_states, c, tol, |d, i, j| {
        (0..mdp.n_actions)
            .map(|a| (1.0 - c) * (mdp.reward(i, a) - mdp.reward(j, a)).abs() + c * w1_rows(mdp.row(i, a), mdp.row(j, a), d))
            .fold(0.0, f64::max)
    })
}

/// Greedy epsilon-cover of the state space and the aggregated MDP.
#[derive(Clone, Debug)]
pub struct Aggregation {
    /// Cluster id of every state.
    pub phi: Vec<usize>,
    /// Medoid state of every cluster.
    pub medoids: Vec<usize>,
    pub eps: f64,
    /// `max_{i,j} |d(medoid(φ(i)), medoid(φ(j))) - d(i,j)|`.
    pub encoder_error: f64,
    /// Clusters as states; rewards and transition rows averaged uniformly
    /// over members, transitions re-targeted to clusters.
    pub mdp: TabularMdp,
}

impl Aggregation {
    pub fn n_clusters(&self) -> usize {
        self.medoids.len()
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.phi.len()).filter(|&s| self.phi[s] == k).collect()
    }
}

/// Scan states in index order; each uncovered state becomes a medoid and
/// absorbs every uncovered state within `eps` of it.
pub fn cover(metric: &MetricMatrix, eps: f64) -> (Vec<usize>, Vec<usize>) {
    let n = metric.n;
    let mut phi = vec![usize::MAX; n];
    let mut medoids = Vec::new();
    for m in 0..n {
        if phi[m] != usize::MAX {
            continue;
        }
        let k = medoids.len();
        medoids.push(m);
        for s in m..n {
            if phi[s] == usize::MAX && metric.get(m, s) <= eps {
                phi[s] = k;
            }
        }
    }
    (phi, medoids)
}

pub fn epsilon_cluster(mdp: &TabularMdp, metric: &MetricMatrix, eps: f64) -> Result<Aggregation> {
    let n = mdp.n_states;
    if metric.n != n {
        return Err(Error::Contract(format!("metric is {}×{0}, MDP has {n} states", metric.n)));
    }
    if !(eps >= 0.0) {
        return Err(Error::Contract(format!("radius {eps} must be non-negative")));
    }
    let (phi, medoids) = cover(metric, eps);
    let k = medoids.len();
    let mut encoder_error: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dc = metric.get(medoids[phi[i]], medoids[phi[j]]);
            encoder_error = encoder_error.max((dc - metric.get(i, j)).abs());
        }
    }
    let na = mdp.n_actions;
    let mut r = vec![0.0; k * na];
    let mut p = vec![0.0; k * na * k];
    let mut size = vec![0usize; k];
    for &c in &phi {
        size[c] += 1;
    }
    for s in 0..n {
        let c = phi[s];
        let w = 1.0 / size[c] as f64;
        for a in 0..na {
            r[c * na + a] += w * mdp.reward(s, a);
            for (t, v) in mdp.row(s, a).iter().enumerate() {
                p[(c * na + a) * k + phi[t]] += w * v;
            }
        }
    }
    // Averaged rewards of values in [0, 1] can round a hair outside.
    for v in &mut r {
        *v = v.clamp(0.0, 1.0);
    }
    let agg = TabularMdp::new(k, na, mdp.gamma, r, p)?;
    Ok(Aggregation { phi, medoids, eps, encoder_error, mdp: agg })
}

/// Optimal values, action values and sweep bookkeeping.
#[derive(Clone, Debug)]
pub struct ValueResult {
    pub v: Vec<f64>,
    /// `q[s * n_actions + a]`.
    pub q: Vec<f64>,
    pub iterations: usize,
    pub changes: Vec<f64>,
}

/// Bellman-optimality iteration from `V ≡ 0`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<ValueResult> {
    if !(tol > 0.0) {
        return Err(Error::Contract(format!("tolerance {tol} must be positive")));
    }
    let (n, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let mut v = vec![0.0; n];
    let mut q = vec![0.0; n * na];
    let mut changes = Vec::new();
    for sweep in 1..=MAX_SWEEPS {
        for s in 0..n {
            for a in 0..na {
                let ev: f64 = mdp.row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                q[s * na + a] = mdp.reward(s, a) + g * ev;
            }
        }
        let mut change: f64 = 0.0;
        for s in 0..n {
            let best = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            change = change.max((best - v[s]).abs());
            v[s] = best;
        }
        changes.push(change);
        // γ = 0 converges after one sweep.
        if g == 0.0 || converged(change, g, tol) {
            return Ok(ValueResult { v, q, iterations: sweep, changes });
        }
    }
    Err(Error::Contract(format!("value iteration did not converge in {MAX_SWEEPS} sweeps")))
}

/// Action values closer than this to the maximum count as ties.
const TIE_TOL: f64 = 1e-10;

/// Greedy policy from action values; ties go to the lowest action index.
pub fn greedy_policy(q: &[f64], n_actions: usize) -> Vec<usize> {
    q.chunks(n_actions)
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|v| *v >= best - TIE_TOL).unwrap_or(0)
        })
        .collect()
}

/// Seeded random instance with `2..=max_states` states and
/// `1..=max_actions` actions; successor sparsity is drawn per instance.
pub fn random_instance(seed: u64, max_states: usize, max_actions: usize, gamma: f64) -> Result<TabularMdp> {
    use rand::Rng as _;
    let mut rng = crate::rng_from_seed(seed ^ 0xB15_1A7E);
    let n = rng.random_range(2..=max_states.max(2));
    let a = rng.random_range(1..=max_actions.max(1));
    let sparsity = rng.random_range(0.2..=1.0);
    crate::envs::random_mdp(n, a, sparsity, gamma, seed)
}
