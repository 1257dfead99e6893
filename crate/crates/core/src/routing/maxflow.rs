//! Membership test for stochastic splits via max flow.
//!
//! A split `r` over `δ⁺(v)` is admissible for `π` iff mass `π(M)` of every
//! perceived set `M` can be spread over the members of `M` so that edge `e`
//! receives exactly `r_e`. That is a transportation problem: source → `M`
//! (capacity `π(M)`) → `e ∈ M` (unbounded) → sink (capacity `r_e`). It is
//! feasible iff the max flow saturates all of `π`; otherwise the edge vertices
//! reachable in the residual graph form a set `M` with `Σ_{e∈M} r_e < ρ(M)`.

use std::collections::VecDeque;

use super::ActiveSetProbabilities;
use crate::network::EdgeId;

/// Tolerance on flow values and sums.
const FEAS_TOL: f64 = 1e-9;
const RESIDUAL_EPS: f64 = 1e-15;

/// Weights `r_{M,e}` of a feasible decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `(M as local mask, e, r_{M,e})` with positive weight.
    pub weights: Vec<(u32, EdgeId, f64)>,
}

impl Decomposition {
    /// `Σ_{e∈M} r_{M,e}` for one subset.
    pub fn subset_total(&self, mask: u32) -> f64 {
        self.weights.iter().filter(|w| w.0 == mask).map(|w| w.2).sum()
    }

    /// `Σ_{M∋e} r_{M,e}` for one edge.
    pub fn edge_total(&self, e: EdgeId) -> f64 {
        self.weights.iter().filter(|w| w.1 == e).map(|w| w.2).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Membership {
    Feasible(Decomposition),
    /// `Σ_{e∈M} r_e < ρ(M)` for the witness `M`.
    Violated {
        subset: Vec<EdgeId>,
        mask: u32,
        split_mass: f64,
        rho: f64,
    },
    /// Subset inequalities hold but `Σ_e r_e ≠ 1`.
    TotalMismatch {
        total: f64,
    },
}

impl Membership {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Membership::Feasible(_))
    }
}

struct Link {
    to: usize,
    cap: f64,
    flow: f64,
}

struct FlowNetwork {
    arcs: Vec<Link>,
    adj: Vec<Vec<usize>>,
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        Self { arcs: Vec::new(), adj: vec![Vec::new(); n] }
    }

    fn add_arc(&mut self, from: usize, to: usize, cap: f64) -> usize {
        let id = self.arcs.len();
        self.arcs.push(Link { to, cap, flow: 0.0 });
        self.arcs.push(Link { to: from, cap: 0.0, flow: 0.0 });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    fn residual(&self, a: usize) -> f64 {
        self.arcs[a].cap - self.arcs[a].flow
    }

    /// Edmonds-Karp.
    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        loop {
            let pred = self.bfs(s);
            if pred[t].is_none() {
                return total;
            }
            let mut push = f64::INFINITY;
            let mut at = t;
            while at != s {
                let a = pred[at].unwrap();
                push = push.min(self.residual(a));
                at = self.arcs[a ^ 1].to;
            }
            let mut at = t;
            while at != s {
                let a = pred[at].unwrap();
                self.arcs[a].flow += push;
                self.arcs[a ^ 1].flow -= push;
                at = self.arcs[a ^ 1].to;
            }
            total += push;
        }
    }

    /// Predecessor arcs of a BFS tree over arcs with positive residual.
    fn bfs(&self, s: usize) -> Vec<Option<usize>> {
        let mut pred = vec![None; self.adj.len()];
        let mut seen = vec![false; self.adj.len()];
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &a in &self.adj[u] {
                let w = self.arcs[a].to;
                if !seen[w] && self.residual(a) > RESIDUAL_EPS {
                    seen[w] = true;
                    pred[w] = Some(a);
                    queue.push_back(w);
                }
            }
        }
        pred
    }

    fn reachable(&self, s: usize) -> Vec<bool> {
        let pred = self.bfs(s);
        (0..self.adj.len()).map(|u| u == s || pred[u].is_some()).collect()
    }
}

/// Decomposes `split` (over `δ⁺(v)` in local order) into `r_{M,e}` or returns
/// a violated inequality.
pub fn decompose_split(split: &[f64], pi: &ActiveSetProbabilities) -> Membership {
    let d = pi.degree();
    assert_eq!(split.len(), d, "split must cover every outgoing edge");
    let subsets: Vec<u32> = (1..1u32 << d).filter(|&m| pi.pi(m) > 0.0).collect();
    // vertices: source, subsets, edges, sink
    let source = 0;
    let edge_vertex = |k: usize| 1 + subsets.len() + k;
    let sink = 1 + subsets.len() + d;
    let mut g = FlowNetwork::new(sink + 1);
    let mut middle = Vec::new();
    for (j, &m) in subsets.iter().enumerate() {
        g.add_arc(source, 1 + j, pi.pi(m));
        for k in (0..d).filter(|k| m >> k & 1 == 1) {
            middle.push((g.add_arc(1 + j, edge_vertex(k), f64::INFINITY), m, k));
        }
    }
    for (k, &r) in split.iter().enumerate() {
        g.add_arc(edge_vertex(k), sink, r.max(0.0));
    }
    let value = g.max_flow(source, sink);
    let target: f64 = subsets.iter().map(|&m| pi.pi(m)).sum();

    if value < target - FEAS_TOL {
        let reach = g.reachable(source);
        let mask = (0..d).filter(|&k| reach[edge_vertex(k)]).fold(0u32, |m, k| m | 1 << k);
        let split_mass = (0..d).filter(|k| mask >> k & 1 == 1).map(|k| split[k]).sum();
        return Membership::Violated {
            subset: (0..d).filter(|k| mask >> k & 1 == 1).map(|k| pi.out_edges[k]).collect(),
            mask,
            split_mass,
            rho: pi.rho_mask(mask),
        };
    }
    let total: f64 = split.iter().sum();
    if (total - target).abs() > FEAS_TOL {
        return Membership::TotalMismatch { total };
    }
    let weights = middle
        .into_iter()
        .filter_map(|(a, m, k)| {
            let w = g.arcs[a].flow;
            (w > 0.0).then_some((m, pi.out_edges[k], w))
        })
        .collect();
    Membership::Feasible(Decomposition { weights })
}
