//! Affine-linear volume-delay dynamics, `c_e(θ) = c⁰_e + X_e(θ)/ν_e`.
//!
//! The outflow solves the delay differential equation
//! `X'_{e,i} = f⁺_{e,i} − f⁻_{e,i}` with `F⁻_{e,i}(τ_e(θ)) = F⁺_{e,i}(θ)`. Since
//! `τ_e(θ) ≥ θ + c⁰_e`, the cumulative outflow at grid time `θ_{k+1}` only
//! needs exit times of entry times `≤ θ_{k+1} − c⁰_e`, which are already known
//! once the step is at most `c⁰_e / 4`. Each step inverts the stored exit-time
//! samples by linear interpolation and reads the exact cumulative inflow there.

use super::{EdgeFlows, EdgeLoader, EdgeState, EdgeTrace, LoadError, Loading, OccupancyKind, TravelTimes};
use crate::network::{EdgeId, Network};
use crate::par::{self, Exec};
use crate::ratefn::{self, CumulativeFunction, PiecewiseLinear, RateFunction};

/// Default step is `min_e c⁰_e / DEFAULT_STEP_DIVISOR`.
pub const DEFAULT_STEP_DIVISOR: f64 = 40.0;
/// Largest admissible step as a fraction of `min_e c⁰_e`.
const MAX_STEP_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearDelay {
    /// Grid step Δ; defaults to `min_e c⁰_e / 40`.
    pub step: Option<f64>,
    pub exec: Exec,
}

impl LinearDelay {
    pub fn with_step(step: f64) -> Self {
        Self { step: Some(step), ..Default::default() }
    }

    pub fn effective_step(&self, net: &Network) -> f64 {
        self.step.unwrap_or(net.min_free_flow_time() / DEFAULT_STEP_DIVISOR)
    }
}

impl EdgeLoader for LinearDelay {
    fn name(&self) -> &'static str {
        "linear-delay"
    }

    fn validate(&self, net: &Network) -> Result<(), LoadError> {
        for (e, edge) in net.edges().iter().enumerate() {
            if edge.free_flow_time <= 0.0 {
                return Err(LoadError::ModelPrecondition {
                    edge: e,
                    reason: "linear volume delay needs a positive free-flow time".into(),
                });
            }
        }
        let step = self.effective_step(net);
        if !(step > 0.0) || step > MAX_STEP_FRACTION * net.min_free_flow_time() {
            return Err(LoadError::ModelPrecondition {
                edge: 0,
                reason: format!("grid step {step} must lie in (0, min c0 / 4]"),
            });
        }
        Ok(())
    }

    fn load(&self, net: &Network, inflow: &EdgeFlows, horizon: f64) -> Result<Loading, LoadError> {
        inflow.check_dimensions(net)?;
        self.validate(net)?;
        let step = self.effective_step(net);
        let per_edge = par::map_range(self.exec, net.edge_count(), |e| {
            let edge = net.edge(e);
            load_edge(e, inflow.edge(e), edge.capacity, edge.free_flow_time, step, horizon)
        });
        let mut outflow = EdgeFlows::for_network(net);
        let mut traces = Vec::with_capacity(net.edge_count());
        for (e, res) in per_edge.into_iter().enumerate() {
            let (outs, volume) = res?;
            let aggregate = ratefn::combine(&outs, &vec![1.0; outs.len()]).expect("sum of nonnegative rates");
            for (i, f) in outs.into_iter().enumerate() {
                outflow.set(e, i, f);
            }
            let edge = net.edge(e);
            traces.push(EdgeTrace {
                kind: OccupancyKind::Volume,
                capacity: edge.capacity,
                free_flow_time: edge.free_flow_time,
                occupancy: volume,
                aggregate_outflow: aggregate,
            });
        }
        Ok(Loading { outflow, state: EdgeState::new(traces, horizon) })
    }
}

fn load_edge(
    e: EdgeId,
    rates: &[RateFunction],
    capacity: f64,
    free_flow: f64,
    step: f64,
    horizon: f64,
) -> Result<(Vec<RateFunction>, PiecewiseLinear), LoadError> {
    if rates.iter().any(|f| f.values().iter().chain(f.breakpoints()).any(|v| !v.is_finite())) {
        return Err(LoadError::NonFinite { edge: e });
    }
    let n = rates.len();
    let cum_in: Vec<CumulativeFunction> = rates.iter().map(RateFunction::cumulative).collect();
    let steps = (horizon / step).ceil().max(1.0) as usize;
    let theta = |k: usize| k as f64 * step;

    let mut exit = Vec::with_capacity(steps + 1);
    let mut cum_out: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); n];
    exit.push(free_flow);
    for c in cum_out.iter_mut() {
        c.push(0.0);
    }
    for k in 0..steps {
        let s = theta(k + 1);
        let entry = if s <= exit[0] {
            None
        } else {
            // exit[k] >= θ_k + c⁰ > s, so the bracket is always among known samples
            let j = exit.partition_point(|&x| x <= s) - 1;
            if j + 1 > k {
                return Err(LoadError::NonMonotoneExitTime { edge: e, time: s });
            }
            let (lo, hi) = (exit[j], exit[j + 1]);
            Some(theta(j) + (s - lo) / (hi - lo) * step)
        };
        let mut volume = 0.0;
        for i in 0..n {
            let prev = cum_out[i][k];
            let next = entry.map_or(0.0, |eta| cum_in[i].evaluate(eta)).max(prev);
            cum_out[i].push(next);
            volume += cum_in[i].evaluate(s) - next;
        }
        let tau = s + free_flow + volume.max(0.0) / capacity;
        if tau <= exit[k] {
            return Err(LoadError::NonMonotoneExitTime { edge: e, time: s });
        }
        exit.push(tau);
    }

    let grid: Vec<f64> = (0..=steps).map(theta).collect();
    let outs: Vec<RateFunction> = cum_out
        .iter()
        .map(|c| {
            let vals = c.windows(2).map(|w| (w[1] - w[0]) / step).collect();
            ratefn::restrict(&RateFunction::canonical(grid.clone(), vals), 0.0, horizon)
        })
        .collect();

    // volume X(θ) = Σ F⁺_i(θ) − Σ F⁻_i(θ), exact between the grid and inflow breakpoints
    let out_cum: Vec<CumulativeFunction> = outs.iter().map(RateFunction::cumulative).collect();
    let mut times: Vec<f64> = grid.iter().copied().filter(|&t| t <= horizon).collect();
    times.extend(rates.iter().flat_map(|f| f.breakpoints().iter().copied()).filter(|&t| t <= horizon));
    times.push(horizon);
    times.sort_by(f64::total_cmp);
    times.dedup();
    let values = times
        .iter()
        .map(|&t| {
            let total_in: f64 = cum_in.iter().map(|c| c.evaluate(t)).sum();
            let total_out: f64 = out_cum.iter().map(|c| c.evaluate(t)).sum();
            (total_in - total_out).max(0.0)
        })
        .collect();
    Ok((outs, PiecewiseLinear::new(times, values)))
}

/// Residual of the "respects travel times" identity on edge `e`:
/// `max_θ |F⁺_{e,i}(θ) − F⁻_{e,i}(τ_e(θ))|` over entry times whose exit lies
/// within the state's horizon, maximized over commodities. Returns the raw
/// residual and the residual per unit of cumulative inflow.
pub fn travel_time_residual(
    inflow: &[RateFunction],
    outflow: &[RateFunction],
    state: &EdgeState,
    e: EdgeId,
    samples_per_unit: usize,
) -> (f64, f64) {
    let horizon = state.horizon();
    let trace = state.trace(e);
    let cum_in: Vec<CumulativeFunction> = inflow.iter().map(RateFunction::cumulative).collect();
    let cum_out: Vec<CumulativeFunction> = outflow.iter().map(RateFunction::cumulative).collect();
    let count = ((horizon * samples_per_unit as f64).ceil() as usize).max(1);
    let mut worst: f64 = 0.0;
    let mut max_mass: f64 = 0.0;
    for k in 0..=count {
        let t = horizon * k as f64 / count as f64;
        let tau = t + trace.travel_time(t);
        if tau > horizon {
            break;
        }
        for (ci, co) in cum_in.iter().zip(&cum_out) {
            let lhs = ci.evaluate(t);
            max_mass = max_mass.max(lhs);
            worst = worst.max((lhs - co.evaluate(tau)).abs());
        }
    }
    let normalized = if max_mass > 0.0 { worst / max_mass } else { 0.0 };
    (worst, normalized)
}
