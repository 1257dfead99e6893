//! One extension step: the fixed-point map for inflows on `[T, T+α)`.

use std::collections::HashMap;

use super::banach::{banach_iterate, BanachOptions, BanachOutcome};
use super::{InitialGuess, SolveError, SolverConfig};
use crate::edge_loading::{EdgeFlows, EdgeLoader, EdgeState};
use crate::network::{CommodityId, Network, NodeId, PathSet};
use crate::par;
use crate::predictors::Predictor;
use crate::ratefn::{self, Norm, RateFunction};
use crate::routing::{
    self, active_edges, balanced_split, dpe_split, estimate_pi, stochastic_split, ActiveEdgeSet, RoutingOperator,
    SplitRecord, TiePolicy,
};

/// Evaluation points closer than this are merged.
const MIN_CELL: f64 = 1e-9;

/// Sticky-policy memory: last split chosen at each (node, commodity).
pub(crate) type SplitMemory = HashMap<(NodeId, CommodityId), Vec<f64>>;

/// Inflow candidate together with the splits that produced it.
#[derive(Debug, Clone)]
pub(crate) struct Iterate {
    pub inflow: EdgeFlows,
    pub records: Vec<SplitRecord>,
    pub memory: SplitMemory,
}

pub(crate) struct Engine<'a> {
    pub net: &'a Network,
    pub loader: &'a dyn EdgeLoader,
    pub routing: &'a RoutingOperator,
    pub paths: &'a PathSet,
    pub config: &'a SolverConfig,
    /// Network inflow `u_{v,i}`, node-major.
    network_inflow: Vec<RateFunction>,
    capacities: Vec<Vec<f64>>,
}

impl<'a> Engine<'a> {
    pub fn new(
        net: &'a Network,
        loader: &'a dyn EdgeLoader,
        routing: &'a RoutingOperator,
        paths: &'a PathSet,
        config: &'a SolverConfig,
    ) -> Self {
        let nc = net.commodity_count();
        let mut network_inflow = vec![RateFunction::zero(); net.node_count() * nc];
        for (i, c) in net.commodities().iter().enumerate() {
            for (v, f) in &c.inflows {
                let slot = &mut network_inflow[v * nc + i];
                *slot = ratefn::combine(&[slot.clone(), f.clone()], &[1.0, 1.0]).expect("nonnegative inflows");
            }
        }
        let capacities =
            (0..net.node_count()).map(|v| net.out_edges(v).iter().map(|&e| net.edge(e).capacity).collect()).collect();
        Self { net, loader, routing, paths, config, network_inflow, capacities }
    }

    pub fn network_inflow(&self, v: NodeId, i: CommodityId) -> &RateFunction {
        &self.network_inflow[v * self.net.commodity_count() + i]
    }

    /// `b_{v,i} = u_{v,i} + Σ_{e∈δ⁻(v)} f⁻_{e,i}`, node-major.
    pub fn node_inflows(&self, outflow: &EdgeFlows) -> Vec<RateFunction> {
        let nc = self.net.commodity_count();
        (0..self.net.node_count() * nc)
            .map(|slot| {
                let (v, i) = (slot / nc, slot % nc);
                let mut parts = vec![self.network_inflow(v, i).clone()];
                parts.extend(self.net.in_edges(v).iter().map(|&e| outflow.get(e, i).clone()));
                ratefn::combine(&parts, &vec![1.0; parts.len()]).expect("sum of nonnegative rates")
            })
            .collect()
    }

    fn routed_pairs(&self) -> impl Iterator<Item = (NodeId, CommodityId)> + '_ {
        let nc = self.net.commodity_count();
        (0..self.net.node_count())
            .flat_map(move |v| (0..nc).map(move |i| (v, i)))
            .filter(|&(v, i)| self.net.commodity(i).sink != v && self.paths.routable(v, i))
    }

    /// Runs the Banach iteration for `[start, end)` with the past pinned.
    pub fn extension_step(
        &self,
        past: &EdgeFlows,
        memory: &SplitMemory,
        start: f64,
        end: f64,
    ) -> Result<BanachOutcome<Iterate>, SolveError> {
        let initial = match self.config.initial_guess {
            InitialGuess::Zero => past.clone(),
            InitialGuess::Extrapolate => past.map(|f| {
                let last = f.value_before(start);
                if last > 0.0 && start > 0.0 {
                    f.splice(start, &RateFunction::constant(start, end, last).expect("positive rate"))
                } else {
                    f.clone()
                }
            }),
        };
        let initial = Iterate { inflow: initial, records: Vec::new(), memory: memory.clone() };
        let opts = BanachOptions {
            tol: self.config.tol_fp,
            max_iter: self.config.max_iter,
            stall_window: self.config.stall_window,
            ..Default::default()
        };
        banach_iterate(
            |g: &Iterate| self.apply(past, memory, &g.inflow, start, end),
            |a: &Iterate, b: &Iterate| interval_distance(&a.inflow, &b.inflow, start, end, self.config.norm),
            initial,
            &opts,
        )
    }

    /// `Ψ(g⁺)`: load, split node inflows on `[start, end)`, splice with the past.
    fn apply(
        &self,
        past: &EdgeFlows,
        memory: &SplitMemory,
        candidate: &EdgeFlows,
        start: f64,
        end: f64,
    ) -> Result<Iterate, SolveError> {
        let loading = self.loader.load(self.net, candidate, end)?;
        let inflows: Vec<RateFunction> =
            self.node_inflows(&loading.outflow).iter().map(|b| ratefn::restrict(b, start, end)).collect();
        let mut memory = memory.clone();
        let records = match self.routing {
            RoutingOperator::Dpe { predictor, tie_policy, tie_tol } => self.dpe_schedule(
                &loading.state,
                candidate,
                &inflows,
                &mut memory,
                start,
                end,
                (predictor, *tie_policy, *tie_tol),
            )?,
            RoutingOperator::Stochastic { .. } => self.spe_schedule(&loading.state, &inflows, start, end)?,
        };
        let inflow = self.assemble(past, &records, &inflows, start, end);
        Ok(Iterate { inflow, records, memory })
    }

    /// New inflows: `r_{e,i}` from the records times `b_{v,i}` on the step.
    fn assemble(
        &self,
        past: &EdgeFlows,
        records: &[SplitRecord],
        inflows: &[RateFunction],
        start: f64,
        end: f64,
    ) -> EdgeFlows {
        let nc = self.net.commodity_count();
        let mut pieces: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); self.net.edge_count() * nc];
        for rec in records {
            for (&e, &r) in rec.edges.iter().zip(&rec.fractions) {
                if r > 0.0 {
                    pieces[e * nc + rec.commodity].push((rec.theta, rec.until, r));
                }
            }
        }
        let rates = pieces
            .into_iter()
            .enumerate()
            .map(|(slot, ps)| {
                let (e, i) = (slot / nc, slot % nc);
                let head = past.get(e, i);
                if ps.is_empty() {
                    return ratefn::restrict(head, 0.0, start);
                }
                let split = RateFunction::from_pieces(&ps).expect("records are ordered and disjoint");
                let tail = ratefn::restrict(&split.product(&inflows[self.net.edge(e).from * nc + i]), start, end);
                head.splice(start, &tail)
            })
            .collect();
        EdgeFlows::from_rates(self.net.edge_count(), nc, rates).expect("dimensions match")
    }

    fn grid_points(&self, start: f64, end: f64) -> Vec<f64> {
        let step = self.config.routing_step;
        let first = (start / step - 1e-9).ceil() as i64;
        let mut pts: Vec<f64> = (first..).map(|k| k as f64 * step).take_while(|&t| t < end - MIN_CELL).collect();
        if pts.first().is_none_or(|&t| t > start + MIN_CELL) {
            pts.insert(0, start);
        } else {
            pts[0] = start;
        }
        pts
    }

    /// Prediction routing: splits at grid points, inflow breakpoints and
    /// predicted events (queue depletion, active-set changes).
    #[allow(clippy::too_many_arguments)]
    fn dpe_schedule(
        &self,
        state: &EdgeState,
        candidate: &EdgeFlows,
        inflows: &[RateFunction],
        memory: &mut SplitMemory,
        start: f64,
        end: f64,
        (predictor, policy, tie_tol): (&Predictor, TiePolicy, f64),
    ) -> Result<Vec<SplitRecord>, SolveError> {
        let nc = self.net.commodity_count();
        let mut fixed = self.grid_points(start, end);
        fixed.extend(inflows.iter().flat_map(|b| b.breakpoints().iter().copied()).filter(|&t| t > start && t < end));
        fixed.push(end);
        fixed.sort_by(f64::total_cmp);
        fixed.dedup_by(|a, b| (*a - *b).abs() <= MIN_CELL);

        let balanced = policy == TiePolicy::Balanced && predictor.is_instantaneous();
        let mut records = Vec::new();
        let mut theta = start;
        while theta < end - MIN_CELL {
            let mut next_event = f64::INFINITY;
            let mut decisions: Vec<(NodeId, CommodityId, Vec<f64>, f64)> = Vec::new();
            for i in 0..nc {
                let mut actives: Vec<ActiveEdgeSet> = Vec::new();
                for (v, _) in self.routed_pairs().filter(|&(_, j)| j == i) {
                    actives.push(active_edges(self.net, self.paths, predictor, state, v, i, theta, tie_tol)?);
                }
                if balanced {
                    actives.sort_by(|a, b| a.best_cost.total_cmp(&b.best_cost));
                }
                let mut level = vec![f64::NAN; self.net.node_count()];
                level[self.net.commodity(i).sink] = 0.0;
                for a in &actives {
                    let v = a.node;
                    let demand = inflows[v * nc + i].evaluate(theta);
                    let previous = memory.get(&(v, i)).map(Vec::as_slice);
                    let split = if balanced {
                        let other: Vec<f64> = a
                            .out_edges
                            .iter()
                            .map(|&e| (0..nc).filter(|&j| j != i).map(|j| candidate.get(e, j).evaluate(theta)).sum())
                            .collect();
                        let profiles = routing::edge_profiles(state, &a.out_edges, theta, &other);
                        let heads: Vec<f64> = a.out_edges.iter().map(|&e| level[self.net.edge(e).to]).collect();
                        let head_slopes: Vec<f64> = heads.iter().map(|h| if h.is_nan() { 0.0 } else { *h }).collect();
                        let bal = balanced_split(&a.active, &profiles, &head_slopes, demand, previous);
                        level[v] = bal.level;
                        // an inactive edge whose cost closes in on the optimum
                        for k in (0..a.out_edges.len()).filter(|&k| !a.active[k] && a.edge_costs[k].is_finite()) {
                            if heads[k].is_nan() {
                                continue;
                            }
                            let closing = bal.level - (profiles[k].at(0.0) + heads[k]);
                            if closing > 0.0 {
                                next_event = next_event.min(theta + (a.edge_costs[k] - a.best_cost) / closing);
                            }
                        }
                        bal.split
                    } else {
                        dpe_split(a, previous, policy, &self.capacities[v])
                    };
                    if demand > 0.0 {
                        memory.insert((v, i), split.clone());
                    }
                    decisions.push((v, i, split, demand));
                }
            }
            let mut entering = vec![0.0; self.net.edge_count()];
            for (v, _, split, demand) in &decisions {
                for (&e, r) in self.net.out_edges(*v).iter().zip(split) {
                    entering[e] += r * demand;
                }
            }
            for (e, &x) in entering.iter().enumerate() {
                if let Some(t) = state.depletion_time(e, theta, x) {
                    next_event = next_event.min(t);
                }
            }
            let upcoming = fixed[fixed.partition_point(|&t| t <= theta + MIN_CELL)];
            let until = if next_event > theta + MIN_CELL { upcoming.min(next_event) } else { upcoming };
            for (v, i, split, _) in decisions {
                if inflows[v * nc + i].integral(theta, until) > 0.0 {
                    records.push(SplitRecord {
                        theta,
                        until,
                        node: v,
                        commodity: i,
                        edges: self.net.out_edges(v).to_vec(),
                        fractions: split,
                    });
                }
            }
            theta = until;
        }
        Ok(records)
    }

    /// Stochastic routing: prescriptive splits from `π` at each grid point.
    fn spe_schedule(
        &self,
        state: &EdgeState,
        inflows: &[RateFunction],
        start: f64,
        end: f64,
    ) -> Result<Vec<SplitRecord>, SolveError> {
        let RoutingOperator::Stochastic { predictor, noise, samples, seed } = self.routing else {
            unreachable!("stochastic schedule with a deterministic operator")
        };
        let nc = self.net.commodity_count();
        let mut cells: Vec<f64> = self.grid_points(start, end);
        cells.push(end);
        let tasks: Vec<(f64, f64, NodeId, CommodityId)> = cells
            .windows(2)
            .flat_map(|w| self.routed_pairs().map(move |(v, i)| (w[0], w[1], v, i)))
            .filter(|&(a, b, v, i)| inflows[v * nc + i].integral(a, b) > 0.0)
            .collect();
        let exec = self.config.exec;
        let results = par::map_slice(exec, &tasks, |&(a, b, v, i)| {
            let split = if self.net.out_edges(v).len() == 1 {
                vec![1.0]
            } else {
                let pi = estimate_pi(self.net, self.paths, predictor, state, noise, v, i, a, *samples, *seed, exec)?;
                stochastic_split(&pi)
            };
            Ok::<_, SolveError>(SplitRecord {
                theta: a,
                until: b,
                node: v,
                commodity: i,
                edges: self.net.out_edges(v).to_vec(),
                fractions: split,
            })
        });
        results.into_iter().collect()
    }
}

/// `p`-norm distance of two flows on `[a, b]`, all components together.
pub(crate) fn interval_distance(f: &EdgeFlows, g: &EdgeFlows, a: f64, b: f64, norm: Norm) -> f64 {
    let parts = f.rates().iter().zip(g.rates()).map(|(x, y)| ratefn::distance(x, y, a, b, norm));
    match norm {
        Norm::Sup => parts.fold(0.0, f64::max),
        Norm::L(p) => parts.map(|d| d.powf(p)).sum::<f64>().powf(1.0 / p),
    }
}
