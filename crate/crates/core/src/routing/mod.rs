//! Routing operators: which outgoing edges particles may take at a node.
//!
//! Deterministic prediction routing sends flow only onto *active* edges, the
//! first edges of paths with minimal predicted cost. Stochastic prediction
//! routing draws a noisy predictor per particle and splits by the probability
//! `π_{v,M,i}` that `M` is the perceived active set.
//!
//! Node-local quantities (splits, subsets of `δ⁺(v)`) are indexed by position
//! in [`Network::out_edges`]; subsets are bitmasks over those positions.

mod maxflow;
mod stochastic;

pub use maxflow::{decompose_split, Decomposition, Membership};
pub use stochastic::{
    estimate_pi, estimate_pi_from_costs, rho, stochastic_split, ActiveSetProbabilities, NoiseDist, NoiseModel,
    DEFAULT_SAMPLES,
};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::edge_loading::{EdgeState, SlopeProfile, TravelTimes};
use crate::network::{CommodityId, EdgeId, Network, NodeId, PathSet};
use crate::predictors::{PredictError, Predictor};

/// Default absolute tolerance for cost ties in active sets.
pub const DEFAULT_TIE_TOL: f64 = 1e-9;
/// Largest node out-degree the subset-based machinery accepts.
pub const MAX_DEGREE: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("node {node} has no path to the sink of commodity {commodity}")]
    NoPath { node: NodeId, commodity: CommodityId },
    #[error("node {node} has out-degree {degree}, above the supported maximum {max}", max = MAX_DEGREE)]
    DegreeTooLarge { node: NodeId, degree: usize },
    #[error("Monte-Carlo sample count must be positive")]
    ZeroSamples,
    #[error("edge {edge} does not leave node {node}")]
    NotOutgoing { edge: EdgeId, node: NodeId },
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

pub(crate) fn check_degree(net: &Network, v: NodeId) -> Result<usize, RoutingError> {
    let d = net.out_edges(v).len();
    if d > MAX_DEGREE {
        return Err(RoutingError::DegreeTooLarge { node: v, degree: d });
    }
    Ok(d)
}

/// Local bitmask of `edges` within `δ⁺(v)`.
pub fn local_mask(net: &Network, v: NodeId, edges: &[EdgeId]) -> Result<u32, RoutingError> {
    let out = net.out_edges(v);
    edges.iter().try_fold(0u32, |mask, &e| {
        let k = out.iter().position(|&x| x == e).ok_or(RoutingError::NotOutgoing { edge: e, node: v })?;
        Ok(mask | 1 << k)
    })
}

/// Edges of `δ⁺(v)` selected by a local bitmask.
pub fn mask_edges(net: &Network, v: NodeId, mask: u32) -> Vec<EdgeId> {
    net.out_edges(v).iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &e)| e).collect()
}

/// Active outgoing edges of `v` for commodity `i` at `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveEdgeSet {
    pub node: NodeId,
    pub commodity: CommodityId,
    pub theta: f64,
    /// `δ⁺(v)` in local order.
    pub out_edges: Vec<EdgeId>,
    /// Cheapest predicted cost of a path starting with each out-edge
    /// (`∞` if no such path reaches the sink).
    pub edge_costs: Vec<f64>,
    pub best_cost: f64,
    pub active: Vec<bool>,
}

impl ActiveEdgeSet {
    pub fn edges(&self) -> Vec<EdgeId> {
        self.out_edges.iter().zip(&self.active).filter(|(_, &a)| a).map(|(&e, _)| e).collect()
    }

    pub fn mask(&self) -> u32 {
        self.active.iter().enumerate().filter(|(_, &a)| a).fold(0, |m, (k, _)| m | 1 << k)
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Edges `e ∈ δ⁺(v)` whose best path cost is within `tie_tol` of the optimum.
#[allow(clippy::too_many_arguments)]
pub fn active_edges(
    net: &Network,
    paths: &PathSet,
    predictor: &Predictor,
    state: &dyn TravelTimes,
    v: NodeId,
    i: CommodityId,
    theta: f64,
    tie_tol: f64,
) -> Result<ActiveEdgeSet, RoutingError> {
    let ps = paths.paths(v, i);
    if ps.is_empty() {
        return Err(RoutingError::NoPath { node: v, commodity: i });
    }
    let costs = predictor.path_costs(ps, theta, state)?;
    Ok(active_from_costs(net, v, i, theta, ps.iter().map(|p| p.first_edge()).zip(costs), tie_tol))
}

/// As [`active_edges`], from precomputed `(first edge, path cost)` pairs.
pub fn active_from_costs(
    net: &Network,
    v: NodeId,
    i: CommodityId,
    theta: f64,
    first_edge_costs: impl Iterator<Item = (EdgeId, f64)>,
    tie_tol: f64,
) -> ActiveEdgeSet {
    let out_edges = net.out_edges(v).to_vec();
    let mut edge_costs = vec![f64::INFINITY; out_edges.len()];
    for (e, c) in first_edge_costs {
        let k = out_edges.iter().position(|&x| x == e).expect("path starts at v");
        edge_costs[k] = edge_costs[k].min(c);
    }
    let best_cost = edge_costs.iter().copied().fold(f64::INFINITY, f64::min);
    let active = edge_costs.iter().map(|&c| c <= best_cost + tie_tol).collect();
    ActiveEdgeSet { node: v, commodity: i, theta, out_edges, edge_costs, best_cost, active }
}

/// How a DPE split is selected among several active edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    /// Equal shares on all active edges.
    Uniform,
    /// Previous proportions among still-active edges, renormalized; falls back
    /// to capacity-proportional shares.
    Sticky,
    /// Splits that keep all used edges equally cheap to first order (the
    /// instantaneous-equilibrium selection); leftover freedom is shared as in
    /// `Sticky`.
    #[default]
    Balanced,
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::Uniform => "uniform",
            TiePolicy::Sticky => "sticky",
            TiePolicy::Balanced => "balanced",
        })
    }
}

impl FromStr for TiePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(TiePolicy::Uniform),
            "sticky" => Ok(TiePolicy::Sticky),
            "balanced" => Ok(TiePolicy::Balanced),
            other => Err(format!("unknown tie policy '{other}' (expected uniform, sticky or balanced)")),
        }
    }
}

/// Split over `δ⁺(v)` supported on the active edges. `capacities` seeds the
/// sticky policy when no usable previous split exists. `Balanced` needs slope
/// information and is resolved by [`balanced_split`]; here it behaves like
/// `Sticky`.
pub fn dpe_split(active: &ActiveEdgeSet, previous: Option<&[f64]>, policy: TiePolicy, capacities: &[f64]) -> Vec<f64> {
    let d = active.out_edges.len();
    let mut split = vec![0.0; d];
    let n = active.count();
    if n == 0 {
        return split;
    }
    if n == 1 {
        split[active.active.iter().position(|&a| a).unwrap()] = 1.0;
        return split;
    }
    let weights: Vec<f64> = match policy {
        TiePolicy::Uniform => active.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        TiePolicy::Sticky | TiePolicy::Balanced => sticky_weights(&active.active, previous, capacities),
    };
    let total: f64 = weights.iter().sum();
    for (s, w) in split.iter_mut().zip(&weights) {
        *s = w / total;
    }
    split
}

fn sticky_weights(members: &[bool], previous: Option<&[f64]>, capacities: &[f64]) -> Vec<f64> {
    if let Some(prev) = previous {
        let w: Vec<f64> = members.iter().zip(prev).map(|(&a, &p)| if a { p } else { 0.0 }).collect();
        if w.iter().sum::<f64>() > 0.0 {
            return w;
        }
    }
    members.iter().zip(capacities).map(|(&a, &c)| if a { c } else { 0.0 }).collect()
}

/// Result of a balanced selection at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedSplit {
    pub split: Vec<f64>,
    /// Common right derivative of the cost of all used edges.
    pub level: f64,
}

/// Water-filling selection among active edges. Each active edge `k` has cost
/// slope `head_slope[k] + profile[k].at(x_k)` when it receives `x_k`; the
/// split routes `demand` so that all used edges share the smallest possible
/// common slope. Edges whose slope is flat at that level share the remainder by
/// sticky weights.
pub fn balanced_split(
    active: &[bool],
    profiles: &[SlopeProfile],
    head_slope: &[f64],
    demand: f64,
    previous: Option<&[f64]>,
) -> BalancedSplit {
    const TOL: f64 = 1e-12;
    let d = active.len();
    let base: Vec<f64> = (0..d).map(|k| profiles[k].base + head_slope[k]).collect();
    let members: Vec<usize> = (0..d).filter(|&k| active[k]).collect();
    let capacities: Vec<f64> = profiles.iter().map(|p| p.capacity).collect();
    let mut split = vec![0.0; d];
    if members.is_empty() {
        return BalancedSplit { split, level: f64::INFINITY };
    }
    let lowest = members.iter().map(|&k| base[k]).fold(f64::INFINITY, f64::min);
    if demand <= 0.0 {
        let group: Vec<bool> = (0..d).map(|k| active[k] && base[k] <= lowest + TOL).collect();
        let w = sticky_weights(&group, previous, &capacities);
        let total: f64 = w.iter().sum();
        for (s, w) in split.iter_mut().zip(&w) {
            *s = w / total;
        }
        return BalancedSplit { split, level: lowest };
    }

    let mut levels: Vec<f64> = members.iter().map(|&k| base[k]).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|a, b| (*a - *b).abs() <= TOL);
    let amount = |k: usize, lambda: f64| profiles[k].flat + (lambda - base[k]) * profiles[k].capacity;
    let mut x = vec![0.0; d];
    let mut level = None;
    for &beta in &levels {
        let below: Vec<usize> = members.iter().copied().filter(|&k| base[k] < beta - TOL).collect();
        let at: Vec<usize> = members.iter().copied().filter(|&k| (base[k] - beta).abs() <= TOL).collect();
        let left: f64 = below.iter().map(|&k| amount(k, beta)).sum();
        if !below.is_empty() && left >= demand {
            let lambda = solve_linear(&below, &base, profiles, demand);
            for &k in &below {
                x[k] = amount(k, lambda).max(0.0);
            }
            level = Some(lambda);
            break;
        }
        let flats: f64 = at.iter().map(|&k| profiles[k].flat).sum();
        if left + flats >= demand {
            for &k in &below {
                x[k] = amount(k, beta);
            }
            share_capped(
                &at,
                demand - left,
                profiles,
                &sticky_weights(&mask_of(d, &at), previous, &capacities),
                &mut x,
            );
            level = Some(beta);
            break;
        }
    }
    let level = level.unwrap_or_else(|| {
        let lambda = solve_linear(&members, &base, profiles, demand);
        for &k in &members {
            x[k] = amount(k, lambda).max(0.0);
        }
        lambda
    });
    let total: f64 = x.iter().sum();
    for (s, v) in split.iter_mut().zip(&x) {
        *s = v / total;
    }
    BalancedSplit { split, level }
}

fn mask_of(d: usize, members: &[usize]) -> Vec<bool> {
    (0..d).map(|k| members.contains(&k)).collect()
}

/// `λ` with `Σ_{k∈set} flat_k + (λ − base_k)·ν_k = demand`.
fn solve_linear(set: &[usize], base: &[f64], profiles: &[SlopeProfile], demand: f64) -> f64 {
    let cap: f64 = set.iter().map(|&k| profiles[k].capacity).sum();
    let offset: f64 = set.iter().map(|&k| profiles[k].flat - base[k] * profiles[k].capacity).sum();
    (demand - offset) / cap
}

/// Distributes `amount` over `group` proportionally to `weights`, capping each
/// member at its flat length.
fn share_capped(group: &[usize], mut amount: f64, profiles: &[SlopeProfile], weights: &[f64], x: &mut [f64]) {
    let mut open: Vec<usize> = group.to_vec();
    while !open.is_empty() && amount > 0.0 {
        let mut total: f64 = open.iter().map(|&k| weights[k]).sum();
        let uniform = total <= 0.0;
        if uniform {
            total = open.len() as f64;
        }
        let w = |k: usize| if uniform { 1.0 } else { weights[k] };
        let capped: Vec<usize> = open.iter().copied().filter(|&k| amount * w(k) / total >= profiles[k].flat).collect();
        if capped.is_empty() {
            for &k in &open {
                x[k] = amount * w(k) / total;
            }
            return;
        }
        for &k in &capped {
            x[k] = profiles[k].flat;
            amount -= profiles[k].flat;
        }
        open.retain(|k| !capped.contains(k));
    }
}

/// Slope data for a balanced selection at `(v, i, θ)`: profiles of each
/// out-edge given the inflow `other[k]` of the remaining commodities.
pub fn edge_profiles(state: &EdgeState, out_edges: &[EdgeId], theta: f64, other: &[f64]) -> Vec<SlopeProfile> {
    out_edges.iter().zip(other).map(|(&e, &y)| state.slope_profile(e, theta, y)).collect()
}

/// Split fractions `r_{e,i}` as step functions of time, stored like flows.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingSplit {
    pub fractions: crate::edge_loading::EdgeFlows,
}

/// A split decided at one evaluation time, valid until the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecord {
    pub theta: f64,
    pub until: f64,
    pub node: NodeId,
    pub commodity: CommodityId,
    pub edges: Vec<EdgeId>,
    pub fractions: Vec<f64>,
}

/// Behavioural model used by the solver.
#[derive(Debug, Clone)]
pub enum RoutingOperator {
    Dpe { predictor: Predictor, tie_policy: TiePolicy, tie_tol: f64 },
    Stochastic { predictor: Predictor, noise: NoiseModel, samples: usize, seed: u64 },
}

impl RoutingOperator {
    pub fn ide(tie_policy: TiePolicy) -> Self {
        RoutingOperator::Dpe { predictor: Predictor::Constant, tie_policy, tie_tol: DEFAULT_TIE_TOL }
    }

    /// Stochastic routing around the constant predictor.
    pub fn stochastic_ide(noise: NoiseModel, samples: usize, seed: u64) -> Self {
        RoutingOperator::Stochastic { predictor: Predictor::Constant, noise, samples, seed }
    }

    pub fn predictor(&self) -> &Predictor {
        match self {
            RoutingOperator::Dpe { predictor, .. } | RoutingOperator::Stochastic { predictor, .. } => predictor,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RoutingOperator::Dpe { .. } => "dpe",
            RoutingOperator::Stochastic { predictor: Predictor::Constant, .. } => "stochastic-ide",
            RoutingOperator::Stochastic { .. } => "spe",
        }
    }
}
