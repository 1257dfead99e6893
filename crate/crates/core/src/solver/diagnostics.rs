//! Residuals and equilibrium gaps of a flow.

use serde::Serialize;

use super::{SolveError, SolverConfig};
use crate::edge_loading::{consistency_residual, EdgeLoader, EdgeState, Flow};
use crate::network::{CommodityId, Network, NodeId, PathSet};
use crate::par::{self, Exec};
use crate::predictors::{PredictError, Predictor};
use crate::ratefn::{self, Norm, RateFunction};
use crate::routing::{active_edges, decompose_split, estimate_pi, stochastic_split, RoutingError, RoutingOperator};

/// `‖Σ_{e∈δ⁺(v)} f⁺_{e,i} − 1_{v≠t_i}(u_{v,i} + Σ_{e∈δ⁻(v)} f⁻_{e,i})‖₁` on
/// `[0, horizon]`, node-major.
pub fn conservation_residual(net: &Network, flow: &Flow, horizon: f64) -> Vec<f64> {
    let nc = net.commodity_count();
    let sum = |fs: Vec<RateFunction>| ratefn::combine(&fs, &vec![1.0; fs.len()]).expect("nonnegative rates");
    (0..net.node_count() * nc)
        .map(|slot| {
            let (v, i) = (slot / nc, slot % nc);
            let leaving = sum(net.out_edges(v).iter().map(|&e| flow.inflow.get(e, i).clone()).collect());
            let arriving = if net.commodity(i).sink == v {
                RateFunction::zero()
            } else {
                let mut parts: Vec<RateFunction> =
                    net.commodity(i).inflows.iter().filter(|(n, _)| *n == v).map(|(_, f)| f.clone()).collect();
                parts.extend(net.in_edges(v).iter().map(|&e| flow.outflow.get(e, i).clone()));
                sum(parts)
            };
            ratefn::distance(&leaving, &arriving, 0.0, horizon, Norm::L1)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapKind {
    Dpe,
    Spe,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub kind: GapKind,
    pub value: f64,
    /// Total network inflow on the horizon.
    pub total_mass: f64,
    /// Monte-Carlo noise allowance for a stochastic gap: three standard
    /// errors of the difference of two independent estimates.
    pub budget: Option<f64>,
    /// Grid cells whose realized split passed the max-flow membership test.
    pub certified: usize,
    pub violations: usize,
    /// Evaluation points where the predictor could not be evaluated.
    pub skipped_points: usize,
    /// Flow entering edges that start no path to its sink.
    pub stray_mass: f64,
}

/// Equilibrium gap of `flow` under `routing` on `[0, horizon]`.
#[allow(clippy::too_many_arguments)]
pub fn equilibrium_gap(
    net: &Network,
    paths: &PathSet,
    loader: &dyn EdgeLoader,
    routing: &RoutingOperator,
    flow: &Flow,
    horizon: f64,
    routing_step: f64,
    exec: Exec,
) -> Result<GapReport, SolveError> {
    let state = loader.load(net, &flow.inflow, horizon)?.state;
    let total_mass = super::total_network_inflow(net, horizon);
    match routing {
        RoutingOperator::Dpe { predictor, tie_tol, .. } => {
            dpe_gap(net, paths, predictor, *tie_tol, &state, flow, horizon, routing_step, total_mass, exec)
        }
        RoutingOperator::Stochastic { .. } => {
            spe_gap(net, paths, routing, &state, flow, horizon, routing_step, total_mass, exec)
        }
    }
}

fn routed(net: &Network, paths: &PathSet, v: NodeId, i: CommodityId) -> bool {
    net.commodity(i).sink != v && paths.routable(v, i)
}

#[derive(Default)]
struct Partial {
    value: f64,
    stray: f64,
    skipped: usize,
}

#[allow(clippy::too_many_arguments)]
fn dpe_gap(
    net: &Network,
    paths: &PathSet,
    predictor: &Predictor,
    tie_tol: f64,
    state: &EdgeState,
    flow: &Flow,
    horizon: f64,
    routing_step: f64,
    total_mass: f64,
    exec: Exec,
) -> Result<GapReport, SolveError> {
    let nc = net.commodity_count();
    let h = 0.5 * routing_step;
    let mut points: Vec<f64> = (0..).map(|k| k as f64 * h).take_while(|&t| t < horizon).collect();
    points.extend(flow.inflow.rates().iter().flat_map(|f| f.breakpoints().iter().copied()).filter(|&t| t < horizon));
    points.push(horizon);
    points.sort_by(f64::total_cmp);
    points.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    let cells: Vec<(f64, f64)> = points.windows(2).map(|w| (w[0], w[1])).collect();

    let parts = par::map_slice(exec, &cells, |&(a, b)| {
        let (m, w) = (0.5 * (a + b), b - a);
        let mut part = Partial::default();
        for v in 0..net.node_count() {
            for i in 0..nc {
                let out = net.out_edges(v);
                let rates: Vec<f64> = out.iter().map(|&e| flow.inflow.get(e, i).evaluate(m)).collect();
                if rates.iter().all(|&r| r <= 0.0) {
                    continue;
                }
                if !routed(net, paths, v, i) {
                    part.stray += w * rates.iter().sum::<f64>();
                    continue;
                }
                let active = match active_edges(net, paths, predictor, state, v, i, m, tie_tol) {
                    Ok(a) => a,
                    Err(RoutingError::Predict(PredictError::HorizonEscape { .. })) => {
                        part.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(SolveError::from(e)),
                };
                for (k, &r) in rates.iter().enumerate() {
                    if r <= 0.0 {
                        continue;
                    }
                    let c = active.edge_costs[k];
                    if c.is_finite() {
                        part.value += w * r * (c - active.best_cost).max(0.0);
                    } else {
                        part.stray += w * r;
                    }
                }
            }
        }
        Ok(part)
    });
    let mut report = GapReport {
        kind: GapKind::Dpe,
        value: 0.0,
        total_mass,
        budget: None,
        certified: 0,
        violations: 0,
        skipped_points: 0,
        stray_mass: 0.0,
    };
    for p in parts {
        let p = p?;
        report.value += p.value;
        report.stray_mass += p.stray;
        report.skipped_points += p.skipped;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn spe_gap(
    net: &Network,
    paths: &PathSet,
    routing: &RoutingOperator,
    state: &EdgeState,
    flow: &Flow,
    horizon: f64,
    routing_step: f64,
    total_mass: f64,
    exec: Exec,
) -> Result<GapReport, SolveError> {
    let RoutingOperator::Stochastic { predictor, noise, samples, seed } = routing else {
        unreachable!("stochastic gap with a deterministic operator")
    };
    let nc = net.commodity_count();
    let mut grid: Vec<f64> = (0..).map(|k| k as f64 * routing_step).take_while(|&t| t < horizon - 1e-9).collect();
    grid.push(horizon);
    let mut tasks = Vec::new();
    let mut stray = 0.0;
    for w in grid.windows(2) {
        for v in 0..net.node_count() {
            for i in 0..nc {
                let masses: Vec<f64> =
                    net.out_edges(v).iter().map(|&e| flow.inflow.get(e, i).integral(w[0], w[1])).collect();
                let mass: f64 = masses.iter().sum();
                if mass <= 0.0 {
                    continue;
                }
                if !routed(net, paths, v, i) {
                    stray += mass;
                } else {
                    tasks.push((w[0], v, i, masses, mass));
                }
            }
        }
    }
    let parts = par::map_slice(exec, &tasks, |(theta, v, i, masses, mass)| {
        let realized: Vec<f64> = masses.iter().map(|m| m / mass).collect();
        if realized.len() == 1 {
            return Ok::<_, SolveError>((0.0, 0.0, true));
        }
        let fresh =
            estimate_pi(net, paths, predictor, state, noise, *v, *i, *theta, *samples, seed.wrapping_add(1), exec)?;
        let mandated = stochastic_split(&fresh);
        let diff: f64 = realized.iter().zip(&mandated).map(|(a, b)| (a - b).abs()).sum();
        let se: f64 = mandated.iter().map(|&r| (r * (1.0 - r) / *samples as f64).sqrt()).sum();
        let own = estimate_pi(net, paths, predictor, state, noise, *v, *i, *theta, *samples, *seed, exec)?;
        let certified = decompose_split(&realized, &own).is_feasible();
        Ok((mass * diff, 3.0 * std::f64::consts::SQRT_2 * mass * se, certified))
    });
    let mut report = GapReport {
        kind: GapKind::Spe,
        value: 0.0,
        total_mass,
        budget: Some(0.0),
        certified: 0,
        violations: 0,
        skipped_points: 0,
        stray_mass: stray,
    };
    for p in parts {
        let (gap, budget, certified) = p?;
        report.value += gap;
        *report.budget.as_mut().unwrap() += budget;
        if certified {
            report.certified += 1;
        } else {
            report.violations += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub horizon: f64,
    /// Per (node, commodity), node-major.
    pub conservation: Vec<f64>,
    /// Per (edge, commodity), edge-major.
    pub consistency: Vec<f64>,
    pub max_conservation: f64,
    pub max_consistency: f64,
    /// Largest residual divided by the horizon.
    pub conservation_per_unit: f64,
    pub consistency_per_unit: f64,
    pub gap: GapReport,
}

impl Diagnostics {
    pub fn compute(
        net: &Network,
        paths: &PathSet,
        loader: &dyn EdgeLoader,
        routing: &RoutingOperator,
        flow: &Flow,
        horizon: f64,
        config: &SolverConfig,
    ) -> Result<Self, SolveError> {
        let conservation = conservation_residual(net, flow, horizon);
        let consistency = if horizon > 0.0 {
            consistency_residual(net, flow, loader, horizon)?
        } else {
            vec![0.0; net.edge_count() * net.commodity_count()]
        };
        let gap = if horizon > 0.0 {
            equilibrium_gap(net, paths, loader, routing, flow, horizon, config.routing_step, config.exec)?
        } else {
            GapReport {
                kind: if matches!(routing, RoutingOperator::Dpe { .. }) { GapKind::Dpe } else { GapKind::Spe },
                value: 0.0,
                total_mass: 0.0,
                budget: None,
                certified: 0,
                violations: 0,
                skipped_points: 0,
                stray_mass: 0.0,
            }
        };
        let max_conservation = conservation.iter().copied().fold(0.0, f64::max);
        let max_consistency = consistency.iter().copied().fold(0.0, f64::max);
        let per_unit = |x: f64| if horizon > 0.0 { x / horizon } else { x };
        Ok(Self {
            horizon,
            conservation_per_unit: per_unit(max_conservation),
            consistency_per_unit: per_unit(max_consistency),
            conservation,
            consistency,
            max_conservation,
            max_consistency,
            gap,
        })
    }
}
