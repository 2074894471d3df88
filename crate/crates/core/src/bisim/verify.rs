//! Value, return and reward bounds of an epsilon-aggregation built from
//! the on-policy metric under the optimal policy.

use std::fmt::Write as _;

use serde::Serialize;

use super::{epsilon_cluster, greedy_policy, one_hot_policy, pi_bisim_metric, value_iteration, Aggregation, BisimWeights, MetricResult};
use crate::envs::TabularMdp;
use crate::error::{Error, Result};

/// Everything the bound checks share: optimal values and policy of the
/// original MDP, the metric under that policy, the aggregation and the
/// optimal values of the aggregated MDP.
#[derive(Clone, Debug)]
pub struct BoundSetup {
    pub mdp: TabularMdp,
    pub c: f64,
    pub eps: f64,
    pub tol: f64,
    pub v_star: Vec<f64>,
    pub policy: Vec<usize>,
    pub metric: MetricResult,
    pub agg: Aggregation,
    pub v_bar: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ValueBoundReport {
    pub lhs: Vec<f64>,
    pub max_lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct ReturnBoundReport {
    pub horizon: usize,
    /// `|S(τ) - S(φ(τ))|` for every start state.
    pub lhs: Vec<f64>,
    pub max_lhs: f64,
    /// Bound with `(1 - γ^H)` on the reward part.
    pub bound_h: f64,
    /// Bound with `(1 - γ^(H-1))` on the reward part.
    pub bound_h_minus_1: f64,
    pub pass_h: bool,
    pub pass_h_minus_1: bool,
}

impl ReturnBoundReport {
    /// The looser of the two bounds.
    pub fn looser(&self) -> f64 {
        self.bound_h.max(self.bound_h_minus_1)
    }

    /// Pass against the looser bound.
    pub fn pass(&self) -> bool {
        self.pass_h || self.pass_h_minus_1
    }

    /// Name of the tighter variant.
    pub fn tighter(&self) -> &'static str {
        if self.bound_h_minus_1 < self.bound_h {
            "1-gamma^(H-1)"
        } else {
            "1-gamma^H"
        }
    }
}

#[derive(Clone, Debug)]
pub struct RewardBoundReport {
    /// `(1-c) |R(s, π(s)) - R̄(φ(s), π(s))|` per state.
    pub lhs: Vec<f64>,
    pub max_lhs: f64,
    pub rhs: f64,
    /// State attaining the maximum.
    pub worst_state: usize,
    pub pass: bool,
    /// Clusters whose members disagree on the optimal action. The reward
    /// bound can only fail through such a cluster: the metric controls
    /// `R(s, π(s))` against `R(s', π(s'))`, not against `R(s', π(s))`.
    pub mixed_clusters: usize,
    /// Diagnostic: the same gap measured against the cluster mean of each
    /// member's own on-policy reward, over `2ε`-scale.
    pub on_policy_max_lhs: f64,
}

impl BoundSetup {
    pub fn new(mdp: &TabularMdp, c: f64, eps: f64, tol: f64) -> Result<Self> {
        mdp.validate()?;
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::Contract(format!("c = {c} outside (0, 1)")));
        }
        let vi = value_iteration(mdp, tol)?;
        let policy = greedy_policy(&vi.q, mdp.n_actions);
        let table = one_hot_policy(&policy, mdp.n_actions);
        let metric = pi_bisim_metric(mdp, &table, BisimWeights::convex(c), tol)?;
        let agg = epsilon_cluster(mdp, &metric.metric, eps)?;
        let v_bar = value_iteration(&agg.mdp, tol)?.v;
        Ok(BoundSetup { mdp: mdp.clone(), c, eps, tol, v_star: vi.v, policy, metric, agg, v_bar })
    }

    fn scale(&self) -> f64 {
        (1.0 - self.mdp.gamma) * (1.0 - self.c)
    }

    pub fn value_bound(&self) -> ValueBoundReport {
        let lhs: Vec<f64> = (0..self.mdp.n_states).map(|s| (self.v_star[s] - self.v_bar[self.agg.phi[s]]).abs()).collect();
        let max_lhs = lhs.iter().copied().fold(0.0, f64::max);
        let rhs = (2.0 * self.eps + 2.0 * self.agg.encoder_error) / self.scale();
        ValueBoundReport { lhs, max_lhs, rhs, pass: max_lhs <= rhs + self.tol }
    }

    /// Exact expectations over the state distribution of the original MDP
    /// under the optimal policy, started from every state in turn.
    pub fn return_bound(&self, horizon: usize) -> ReturnBoundReport {
        let m = &self.mdp;
        let (n, g) = (m.n_states, m.gamma);
        let phi = &self.agg.phi;
        let lhs: Vec<f64> = (0..n)
            .map(|s0| {
                let mut mu = vec![0.0; n];
                mu[s0] = 1.0;
                let (mut orig, mut aggr, mut disc) = (0.0, 0.0, 1.0);
                for _ in 0..horizon {
                    let mut next = vec![0.0; n];
                    for s in 0..n {
                        if mu[s] == 0.0 {
                            continue;
                        }
                        let a = self.policy[s];
                        orig += disc * mu[s] * m.reward(s, a);
                        aggr += disc * mu[s] * self.agg.mdp.reward(phi[s], a);
                        for (t, p) in m.row(s, a).iter().enumerate() {
                            next[t] += mu[s] * p;
                        }
                    }
                    mu = next;
                    disc *= g;
                }
                for s in 0..n {
                    orig += disc * mu[s] * self.v_star[s];
                    aggr += disc * mu[s] * self.v_bar[phi[s]];
                }
                (orig - aggr).abs()
            })
            .collect();
        let max_lhs = lhs.iter().copied().fold(0.0, f64::max);
        let (eps, l, k) = (self.eps, self.agg.encoder_error, self.scale());
        let gh = g.powi(horizon as i32);
        let terminal = 2.0 * gh * (eps + l) / k;
        let bound_h = terminal + 2.0 * eps * (1.0 - gh) / k;
        // γ^(H-1) with H = 0 is 1/γ; for γ = 0 the term is unbounded below.
        let gh1 = if horizon == 0 { g.powi(-1) } else { g.powi(horizon as i32 - 1) };
        let bound_h_minus_1 = terminal + 2.0 * eps * (1.0 - gh1) / k;
        ReturnBoundReport {
            horizon,
            lhs,
            max_lhs,
            bound_h,
            bound_h_minus_1,
            pass_h: max_lhs <= bound_h + self.tol,
            pass_h_minus_1: max_lhs <= bound_h_minus_1 + self.tol,
        }
    }

    pub fn reward_bound(&self) -> RewardBoundReport {
        let lhs: Vec<f64> = (0..self.mdp.n_states)
            .map(|s| {
                let a = self.policy[s];
                (1.0 - self.c) * (self.mdp.reward(s, a) - self.agg.mdp.reward(self.agg.phi[s], a)).abs()
            })
            .collect();
        let worst_state = (0..lhs.len()).max_by(|&a, &b| lhs[a].total_cmp(&lhs[b])).unwrap_or(0);
        let max_lhs = lhs[worst_state];
        let rhs = 2.0 * self.eps;
        let agg = &self.agg;
        let mixed_clusters = (0..agg.n_clusters())
            .filter(|&k| {
                let m = agg.members(k);
                m.iter().any(|&s| self.policy[s] != self.policy[m[0]])
            })
            .count();
        let on_policy_max_lhs = (0..self.mdp.n_states)
            .map(|s| {
                let m = agg.members(agg.phi[s]);
                let mean = m.iter().map(|&x| self.mdp.reward(x, self.policy[x])).sum::<f64>() / m.len() as f64;
                (1.0 - self.c) * (self.mdp.reward(s, self.policy[s]) - mean).abs()
            })
            .fold(0.0, f64::max);
        RewardBoundReport { lhs, max_lhs, rhs, worst_state, pass: max_lhs <= rhs + self.tol, mixed_clusters, on_policy_max_lhs }
    }
}

/// Full pipeline for one MDP and one `(c, ε)` pair.
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub setup: BoundSetup,
    pub value_bound: ValueBoundReport,
    pub return_bound: Vec<ReturnBoundReport>,
    pub reward_bound: RewardBoundReport,
}

pub fn verify_all(mdp: &TabularMdp, c: f64, eps: f64, horizons: &[usize], tol: f64) -> Result<BoundReport> {
    let setup = BoundSetup::new(mdp, c, eps, tol)?;
    let value_bound = setup.value_bound();
    let return_bound = horizons.iter().map(|&h| setup.return_bound(h)).collect();
    let reward_bound = setup.reward_bound();
    Ok(BoundReport { setup, value_bound, return_bound, reward_bound })
}

impl BoundReport {
    /// Every check passes; return bounds are judged against the looser
    /// variant.
    pub fn all_pass(&self) -> bool {
        self.value_bound.pass && self.return_bound.iter().all(|t| t.pass()) && self.reward_bound.pass
    }

    pub fn to_text(&self) -> String {
        let s = &self.setup;
        let mut out = String::new();
        let n = s.mdp.n_states;
        let _ = writeln!(out, "states {n}  actions {}  gamma {}  c {}  eps {}", s.mdp.n_actions, s.mdp.gamma, s.c, s.eps);
        let _ = writeln!(out, "metric iterations {}  (aggregated MDP: uniform member weights)", s.metric.iterations);
        let _ = writeln!(out, "optimal policy {:?}", s.policy);
        let _ = writeln!(out, "metric:");
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{:.6}", s.metric.metric.get(i, j))).collect();
            let _ = writeln!(out, "  {}", row.join(" "));
        }
        let _ = writeln!(out, "clusters {}  assignment {:?}  medoids {:?}", s.agg.n_clusters(), s.agg.phi, s.agg.medoids);
        let _ = writeln!(out, "encoder error L {:.3e}", s.agg.encoder_error);
        let t2 = &self.value_bound;
        let _ = writeln!(out, "value bound     lhs {:.6e}  rhs {:.6e}  {}", t2.max_lhs, t2.rhs, verdict(t2.pass));
        for t in &self.return_bound {
            let _ = writeln!(
                out,
                "return bound H={}  lhs {:.6e}  rhs(1-g^H) {:.6e} {}  rhs(1-g^(H-1)) {:.6e} {}  tighter {}",
                t.horizon,
                t.max_lhs,
                t.bound_h,
                verdict(t.pass_h),
                t.bound_h_minus_1,
                verdict(t.pass_h_minus_1),
                t.tighter()
            );
        }
        let l1 = &self.reward_bound;
        let _ = writeln!(out, "reward bound    lhs {:.6e}  rhs {:.6e}  {}  (worst state {})", l1.max_lhs, l1.rhs, verdict(l1.pass), l1.worst_state);
        let _ = writeln!(out, "  clusters with mixed optimal actions {}  on-policy reward gap {:.6e}", l1.mixed_clusters, l1.on_policy_max_lhs);
        let _ = writeln!(out, "overall {}", verdict(self.all_pass()));
        out
    }

    /// One summary row per check.
    pub fn check_rows(&self, tag: &str) -> Vec<CheckRow> {
        let s = &self.setup;
        let row = |check: &'static str, horizon: Option<usize>, lhs: f64, rhs: f64, pass: bool| CheckRow {
            tag: tag.to_string(),
            c: s.c,
            eps: s.eps,
            clusters: s.agg.n_clusters(),
            encoder_error: s.agg.encoder_error,
            check,
            horizon,
            lhs,
            rhs,
            pass,
        };
        let mut rows = vec![row("value", None, self.value_bound.max_lhs, self.value_bound.rhs, self.value_bound.pass)];
        for t in &self.return_bound {
            rows.push(row("return_h", Some(t.horizon), t.max_lhs, t.bound_h, t.pass_h));
            rows.push(row("return_h_minus_1", Some(t.horizon), t.max_lhs, t.bound_h_minus_1, t.pass_h_minus_1));
        }
        rows.push(row("reward", None, self.reward_bound.max_lhs, self.reward_bound.rhs, self.reward_bound.pass));
        rows
    }
}

/// CSV record of one bound check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub tag: String,
    pub c: f64,
    pub eps: f64,
    pub clusters: usize,
    pub encoder_error: f64,
    pub check: &'static str,
    pub horizon: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}
