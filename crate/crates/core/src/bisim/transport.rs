//! Exact discrete optimal transport by successive shortest paths on the
//! residual transportation network.

use crate::error::{Error, Result};

/// Masses below this are treated as exhausted.
const MASS_EPS: f64 = 1e-15;

/// Exact `W1` between distributions `p` and `q` over the same `n` points
/// with ground cost `cost[i * n + j]`.
pub fn w1(p: &[f64], q: &[f64], cost: &[f64]) -> Result<f64> {
    let n = p.len();
    if q.len() != n || cost.len() != n * n {
        return Err(Error::Contract(format!("w1: sizes p={} q={} cost={}", n, q.len(), cost.len())));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let total: f64 = v.iter().sum();
        if v.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("w1: `{name}` is not a probability vector (sum {total})")));
        }
    }
    if cost.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(Error::Contract("w1: cost must be finite and non-negative".into()));
    }
    // Mass that stays in place costs nothing when cost[i][i] = 0, but the
    // cost is not required to vanish on the diagonal, so transport all of it.
    let src: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
    let dst: Vec<usize> = (0..n).filter(|&j| q[j] > 0.0).collect();
    let c: Vec<f64> = src.iter().flat_map(|&i| dst.iter().map(move |&j| cost[i * n + j])).collect();
    let a: Vec<f64> = src.iter().map(|&i| p[i]).collect();
    let b: Vec<f64> = dst.iter().map(|&j| q[j]).collect();
    Ok(transport(&a, &b, &c).0)
}

/// Min-cost transportation between supplies `a` (length `m`) and demands
/// `b` (length `k`) with dense costs `c[i * k + j]`. Returns the optimal
/// cost and plan. `a` and `b` must have equal totals.
pub fn transport(a: &[f64], b: &[f64], c: &[f64]) -> (f64, Vec<f64>) {
    let (m, k) = (a.len(), b.len());
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; m * k];
    // Node potentials keep reduced costs non-negative for Dijkstra.
    // Supply nodes are 0..m, demand nodes m..m+k.
    let nn = m + k;
    let mut pot = vec![0.0; nn];

    loop {
        let active: Vec<usize> = (0..m).filter(|&i| supply[i] > MASS_EPS).collect();
        if active.is_empty() || demand.iter().all(|d| *d <= MASS_EPS) {
            break;
        }
        // Dense Dijkstra from all active supply nodes.
        let mut dist = vec![f64::INFINITY; nn];
        let mut prev = vec![usize::MAX; nn];
        let mut done = vec![false; nn];
        for &i in &active {
            dist[i] = 0.0;
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nn {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                // Forward arcs supply u -> every demand node.
                for j in 0..k {
                    let v = m + j;
                    let rc = c[u * k + j] + pot[u] - pot[v];
                    let nd = dist[u] + rc.max(0.0);
                    if nd < dist[v] {
                        dist[v] = nd;
                        prev[v] = u;
                    }
                }
            } else {
                // Backward arcs demand j -> supply i where flow exists.
                let j = u - m;
                for i in 0..m {
                    if flow[i * k + j] > MASS_EPS {
                        let rc = -c[i * k + j] + pot[u] - pot[i];
                        let nd = dist[u] + rc.max(0.0);
                        if nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        // Closest demand node that still needs mass.
        let Some(t) = (0..k).filter(|&j| demand[j] > MASS_EPS && dist[m + j].is_finite()).min_by(|&x, &y| dist[m + x].total_cmp(&dist[m + y])) else {
            break;
        };
        for v in 0..nn {
            if dist[v].is_finite() {
                pot[v] += dist[v];
            }
        }
        // Walk back to the source, collecting the bottleneck.
        let mut amount = demand[t];
        let mut v = m + t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= m {
                // v is a supply node reached through a backward arc.
                amount = amount.min(flow[v * k + (u - m)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let start = v;
        let mut v = m + t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < m {
                flow[u * k + (v - m)] += amount;
            } else {
                flow[v * k + (u - m)] -= amount;
            }
            v = u;
        }
        supply[start] -= amount;
        demand[t] -= amount;
    }
    let total = flow.iter().zip(c).map(|(f, c)| f * c).sum();
    (total, flow)
}
