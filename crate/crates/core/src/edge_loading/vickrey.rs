//! Vickrey point queues, computed by an exact event sweep.
//!
//! Between consecutive inflow breakpoints and queue-depletion times the queue
//! changes linearly, so the exit-time map `τ(ξ) = ξ + z(ξ)/ν + c⁰` is linear on
//! each sweep segment. A segment `[ξ₀, ξ₁)` with aggregate inflow `a` is
//! mapped onto `[τ(ξ₀), τ(ξ₁))`, and commodity `i` leaves at rate `a_i / τ'`,
//! which is FIFO by construction.

use super::{queue_eps, EdgeFlows, EdgeLoader, EdgeState, EdgeTrace, LoadError, Loading, OccupancyKind};
use crate::network::Network;
use crate::par::{self, Exec};
use crate::ratefn::{PiecewiseLinear, RateFunction};

#[derive(Debug, Clone, Copy, Default)]
pub struct Vickrey {
    pub exec: Exec,
}

impl EdgeLoader for Vickrey {
    fn name(&self) -> &'static str {
        "vickrey"
    }

    fn load(&self, net: &Network, inflow: &EdgeFlows, horizon: f64) -> Result<Loading, LoadError> {
        inflow.check_dimensions(net)?;
        let per_edge = par::map_range(self.exec, net.edge_count(), |e| {
            let edge = net.edge(e);
            load_edge(inflow.edge(e), edge.capacity, edge.free_flow_time).map_err(|()| LoadError::NonFinite { edge: e })
        });
        let mut outflow = EdgeFlows::for_network(net);
        let mut traces = Vec::with_capacity(net.edge_count());
        for (e, res) in per_edge.into_iter().enumerate() {
            let (outs, queue, aggregate_outflow) = res?;
            for (i, f) in outs.into_iter().enumerate() {
                outflow.set(e, i, f);
            }
            let edge = net.edge(e);
            traces.push(EdgeTrace {
                kind: OccupancyKind::PointQueue,
                capacity: edge.capacity,
                free_flow_time: edge.free_flow_time,
                occupancy: queue,
                aggregate_outflow,
            });
        }
        Ok(Loading { outflow, state: EdgeState::new(traces, horizon) })
    }
}

type EdgeResult = (Vec<RateFunction>, PiecewiseLinear, RateFunction);

/// Loads one edge. Returns per-commodity outflows, the queue trajectory and
/// the aggregate outflow.
pub(crate) fn load_edge(rates: &[RateFunction], capacity: f64, free_flow: f64) -> Result<EdgeResult, ()> {
    let n = rates.len();
    let mut grid: Vec<f64> = rates.iter().flat_map(|f| f.breakpoints().iter().copied()).collect();
    if grid.iter().any(|t| !t.is_finite()) || rates.iter().any(|f| f.values().iter().any(|v| !v.is_finite())) {
        return Err(());
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() < 2 {
        return Ok((vec![RateFunction::zero(); n], PiecewiseLinear::new(vec![0.0], vec![0.0]), RateFunction::zero()));
    }

    let eps = queue_eps(capacity);
    let mut out_bps: Vec<f64> = vec![grid[0] + free_flow];
    let mut out_vals: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut agg_vals: Vec<f64> = Vec::new();
    let mut z_times = vec![grid[0]];
    let mut z_vals = vec![0.0];
    let mut z = 0.0_f64;
    let mut exit = grid[0] + free_flow;
    let mut push_out = |exit_end: f64, per: &[f64], agg: f64, out_bps: &mut Vec<f64>| {
        out_bps.push(exit_end);
        for (k, v) in per.iter().enumerate() {
            out_vals[k].push(*v);
        }
        agg_vals.push(agg);
    };

    let mut rate_vec = vec![0.0; n];
    let pieces = grid.len();
    for k in 0..pieces {
        let start = grid[k];
        let end = if k + 1 < pieces { grid[k + 1] } else { f64::INFINITY };
        for (i, f) in rates.iter().enumerate() {
            rate_vec[i] = if end.is_finite() { f.evaluate(start) } else { 0.0 };
        }
        let agg: f64 = rate_vec.iter().sum();
        let mut t = start;
        while t < end {
            if z > eps || agg > capacity {
                let slope = agg - capacity;
                let (seg_end, depletes) = if slope < 0.0 {
                    let dep = t + z / (-slope);
                    if dep < end {
                        (dep, true)
                    } else {
                        (end, false)
                    }
                } else {
                    (end, false)
                };
                let exit_end = exit + (seg_end - t) * agg / capacity;
                if agg > 0.0 && exit_end > exit {
                    let per: Vec<f64> = rate_vec.iter().map(|a| capacity * (a / agg)).collect();
                    push_out(exit_end, &per, capacity, &mut out_bps);
                    exit = exit_end;
                }
                z = if depletes { 0.0 } else { (z + slope * (seg_end - t)).max(0.0) };
                t = seg_end;
                z_times.push(t);
                z_vals.push(z);
            } else {
                z = 0.0;
                if !end.is_finite() {
                    break;
                }
                let exit_end = exit + (end - t);
                push_out(exit_end, &rate_vec, agg, &mut out_bps);
                exit = exit_end;
                t = end;
                z_times.push(t);
                z_vals.push(0.0);
            }
        }
    }

    let outs = out_vals.into_iter().map(|vals| RateFunction::canonical(out_bps.clone(), vals)).collect();
    let aggregate = RateFunction::canonical(out_bps, agg_vals);
    Ok((outs, PiecewiseLinear::new(z_times, z_vals), aggregate))
}
