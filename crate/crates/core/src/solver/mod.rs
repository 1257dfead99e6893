//! Computes coherent flows by extension.
//!
//! Starting from the empty flow, the horizon advances in steps `[T, T+α)`.
//! Each step solves a fixed-point problem for the edge inflows on the new
//! interval by Banach iteration, with everything before `T` pinned. Failed
//! steps are retried with half the step length; steps that cannot be solved at
//! the minimum length end the run with a partial result.

mod banach;
mod diagnostics;
mod extension;

pub use banach::{banach_iterate, BanachOptions, BanachOutcome, BanachStatus, StepController, StepRejected};
pub use diagnostics::{conservation_residual, equilibrium_gap, Diagnostics, GapKind, GapReport};

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::edge_loading::{EdgeFlows, EdgeLoader, EdgeState, Flow, LoadError};
use crate::network::{Network, PathError, PathSet, DEFAULT_MAX_PATHS};
use crate::par::Exec;
use crate::predictors::{PredictError, Predictor};
use crate::ratefn::{Norm, RateFunction};
use crate::routing::{RoutingError, RoutingOperator, RoutingSplit, SplitRecord, MAX_DEGREE};
use extension::{Engine, SplitMemory};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Paths(#[from] PathError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

impl From<PredictError> for SolveError {
    fn from(e: PredictError) -> Self {
        SolveError::Routing(RoutingError::Predict(e))
    }
}

/// Banach starting point on each new interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialGuess {
    /// Continue the last inflow rates before `T`.
    #[default]
    Extrapolate,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub horizon: f64,
    pub alpha0: f64,
    pub alpha_min: f64,
    /// Step growth after a successful step.
    pub growth: f64,
    pub tol_fp: f64,
    pub max_iter: usize,
    pub stall_window: usize,
    /// Routing grid step Δ_r.
    pub routing_step: f64,
    #[serde(serialize_with = "serialize_norm")]
    pub norm: Norm,
    pub initial_guess: InitialGuess,
    #[serde(skip)]
    pub exec: Exec,
}

fn serialize_norm<S: serde::Serializer>(norm: &Norm, s: S) -> Result<S::Ok, S::Error> {
    match norm {
        Norm::L(p) => s.serialize_f64(*p),
        Norm::Sup => s.serialize_str("inf"),
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            alpha0: 1.0,
            alpha_min: 0.05,
            growth: 1.5,
            tol_fp: 1e-9,
            max_iter: 200,
            stall_window: 50,
            routing_step: 0.05,
            norm: Norm::L1,
            initial_guess: InitialGuess::Extrapolate,
            exec: Exec::default(),
        }
    }
}

impl SolverConfig {
    pub fn with_horizon(horizon: f64) -> Self {
        Self { horizon, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: String| Err(SolveError::InvalidConfig(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha0 && self.alpha0.is_finite()) {
            return bad(format!("need 0 < alpha_min <= alpha0, got {} and {}", self.alpha_min, self.alpha0));
        }
        if !(self.tol_fp > 0.0) {
            return bad(format!("fixed-point tolerance must be positive, got {}", self.tol_fp));
        }
        if !(self.routing_step > 0.0 && self.routing_step <= self.alpha_min * (1.0 + 1e-12)) {
            return bad(format!(
                "routing step must lie in (0, alpha_min], got {} with alpha_min {}",
                self.routing_step, self.alpha_min
            ));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if !(self.growth >= 1.0) {
            return bad(format!("step growth must be at least 1, got {}", self.growth));
        }
        if let Norm::L(p) = self.norm {
            if !(p >= 1.0 && p.is_finite()) {
                return bad(format!("norm exponent must be in [1, inf), got {p}"));
            }
        }
        Ok(())
    }
}

/// One attempted extension step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub start: f64,
    pub end: f64,
    pub alpha: f64,
    pub status: BanachStatus,
    pub accepted: bool,
    pub residuals: Vec<f64>,
}

impl StepReport {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SolveStatus {
    Completed,
    Failed { time: f64, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub solve_seconds: f64,
    pub diagnostics_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub flow: Flow,
    pub split: RoutingSplit,
    pub records: Vec<SplitRecord>,
    /// Edge states of the final flow on `[0, achieved_horizon]`.
    pub state: EdgeState,
    pub steps: Vec<StepReport>,
    pub achieved_horizon: f64,
    pub status: SolveStatus,
    pub diagnostics: Diagnostics,
    pub timings: Timings,
}

impl SolveResult {
    pub fn completed(&self) -> bool {
        self.status == SolveStatus::Completed
    }

    pub fn accepted_steps(&self) -> impl Iterator<Item = &StepReport> {
        self.steps.iter().filter(|s| s.accepted)
    }
}

/// Refuses operator/model combinations the extension scheme cannot handle.
pub fn validate_setup(net: &Network, loader: &dyn EdgeLoader, routing: &RoutingOperator) -> Result<(), SolveError> {
    loader.validate(net)?;
    if let Predictor::Perfect = routing.predictor() {
        return Err(SolveError::Unsupported(
            "the perfect predictor needs physics beyond the current step; use composite:<cutoff>".into(),
        ));
    }
    if let RoutingOperator::Stochastic { noise, samples, .. } = routing {
        if *samples == 0 {
            return Err(RoutingError::ZeroSamples.into());
        }
        if !noise.fits(net) {
            return Err(RoutingError::InvalidNoise("noise model does not match the network dimensions".into()).into());
        }
        if let Some(v) = (0..net.node_count()).find(|&v| net.out_edges(v).len() > MAX_DEGREE) {
            return Err(RoutingError::DegreeTooLarge { node: v, degree: net.out_edges(v).len() }.into());
        }
    }
    if !loader.metadata(net).is_uniformly_strictly_causal {
        log::warn!("some free-flow time is zero; the model is not strictly causal and steps may fail to converge");
    }
    Ok(())
}

/// Runs the extension scheme up to `config.horizon`.
pub fn solve(
    net: &Network,
    loader: &dyn EdgeLoader,
    routing: &RoutingOperator,
    config: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    config.validate()?;
    validate_setup(net, loader, routing)?;
    let clock = Instant::now();
    let paths = PathSet::build(net, DEFAULT_MAX_PATHS)?;
    let engine = Engine::new(net, loader, routing, &paths, config);

    let step = config.routing_step;
    let end_cell = (config.horizon / step - 1e-9).ceil() as u64;
    let time_of = |cell: u64| if cell >= end_cell { config.horizon } else { cell as f64 * step };

    let mut committed = EdgeFlows::for_network(net);
    let mut memory = SplitMemory::new();
    let mut records: Vec<SplitRecord> = Vec::new();
    let mut steps = Vec::new();
    let mut controller = StepController::new(config.alpha0, config.alpha_min, config.growth);
    let mut cell = 0u64;
    let mut status = SolveStatus::Completed;

    while cell < end_cell {
        let start = time_of(cell);
        let cells = ((controller.alpha() / step).round() as u64).max(1);
        let next_cell = (cell + cells).min(end_cell);
        let end = time_of(next_cell);
        let attempt = engine.extension_step(&committed, &memory, start, end);
        let outcome = match attempt {
            Ok(o) => o,
            Err(e) => {
                status = SolveStatus::Failed { time: start, reason: e.to_string() };
                break;
            }
        };
        let accepted = outcome.converged();
        steps.push(StepReport {
            start,
            end,
            alpha: end - start,
            status: outcome.status,
            accepted,
            residuals: outcome.residuals.clone(),
        });
        if accepted {
            log::debug!("step [{start}, {end}) converged after {} iterations", outcome.iterations());
            committed = outcome.value.inflow;
            memory = outcome.value.memory;
            records.extend(outcome.value.records);
            cell = next_cell;
            controller.accept();
        } else if controller.reject().is_err() {
            let last = outcome.residuals.last().copied().unwrap_or(f64::NAN);
            status = SolveStatus::Failed {
                time: start,
                reason: format!(
                    "fixed-point iteration on [{start}, {end}) ended as {:?} with residual {last:e} at the minimum step",
                    outcome.status
                ),
            };
            log::error!("hard failure at t = {start}");
            break;
        } else {
            log::debug!("step [{start}, {end}) {:?}; retrying with alpha = {}", outcome.status, controller.alpha());
        }
    }

    let achieved = time_of(cell).min(config.horizon);
    let achieved = if cell == 0 { 0.0 } else { achieved };
    let inflow = committed.restricted(0.0, achieved);
    let loading = loader.load(net, &inflow, achieved.max(f64::MIN_POSITIVE))?;
    let flow = Flow { inflow, outflow: loading.outflow.restricted(0.0, achieved) };
    let split = routing_split(net, &records);
    let solve_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let diagnostics = Diagnostics::compute(net, &paths, loader, routing, &flow, achieved, config)?;
    let timings = Timings { solve_seconds, diagnostics_seconds: clock.elapsed().as_secs_f64() };
    Ok(SolveResult {
        flow,
        split,
        records,
        state: loading.state,
        steps,
        achieved_horizon: achieved,
        status,
        diagnostics,
        timings,
    })
}

/// Step functions `r_{e,i}` from the split records.
pub fn routing_split(net: &Network, records: &[SplitRecord]) -> RoutingSplit {
    let nc = net.commodity_count();
    let mut pieces: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); net.edge_count() * nc];
    for rec in records {
        for (&e, &r) in rec.edges.iter().zip(&rec.fractions) {
            pieces[e * nc + rec.commodity].push((rec.theta, rec.until, r));
        }
    }
    let rates =
        pieces.into_iter().map(|ps| RateFunction::from_pieces(&ps).unwrap_or_else(|_| RateFunction::zero())).collect();
    RoutingSplit { fractions: EdgeFlows::from_rates(net.edge_count(), nc, rates).expect("dimensions match") }
}

/// `Σ` of node inflows, for reporting total demand on `[0, horizon]`.
pub fn total_network_inflow(net: &Network, horizon: f64) -> f64 {
    net.commodities().iter().flat_map(|c| c.inflows.iter()).map(|(_, f)| f.integral(0.0, horizon)).sum()
}
