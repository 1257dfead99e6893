//! Output documents and their writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dta_core::edge_loading::{EdgeFlows, EdgeState, Flow};
use dta_core::network::Network;
use dta_core::ratefn::RateFunction;
use dta_core::routing::{RoutingOperator, SplitRecord};
use dta_core::solver::{Diagnostics, SolveResult, SolveStatus, SolverConfig, StepReport, Timings};

use crate::SolveArgs;

/// `flow.json`: rate triples indexed `[edge][commodity]` for inflow and outflow.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDoc {
    pub horizon: f64,
    pub inflow: Vec<Vec<RateFunction>>,
    pub outflow: Vec<Vec<RateFunction>>,
}

impl FlowDoc {
    pub fn from_flow(flow: &Flow, horizon: f64) -> Self {
        let nested = |f: &EdgeFlows| (0..f.edge_count()).map(|e| f.edge(e).to_vec()).collect();
        Self { horizon, inflow: nested(&flow.inflow), outflow: nested(&flow.outflow) }
    }

    pub fn into_flow(self, net: &Network) -> anyhow::Result<(Flow, f64)> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            bail!("flow horizon must be positive, got {}", self.horizon);
        }
        let (edges, nc) = (net.edge_count(), net.commodity_count());
        let flatten = |name: &str, rows: Vec<Vec<RateFunction>>| -> anyhow::Result<EdgeFlows> {
            if rows.len() != edges {
                bail!("{name} lists {} edges, the network has {edges}", rows.len());
            }
            if let Some((e, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != nc) {
                bail!("{name} of edge {e} lists {} commodities, the network has {nc}", row.len());
            }
            Ok(EdgeFlows::from_rates(edges, nc, rows.into_iter().flatten().collect())?)
        };
        let inflow = flatten("inflow", self.inflow)?;
        let outflow = flatten("outflow", self.outflow)?;
        Ok((Flow { inflow, outflow }, self.horizon))
    }
}

#[derive(Debug, Serialize)]
pub struct DiagnosticsDoc<'a> {
    pub status: &'a SolveStatus,
    pub achieved_horizon: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub total_iterations: usize,
    pub residuals: &'a Diagnostics,
    pub steps: &'a [StepReport],
}

impl<'a> DiagnosticsDoc<'a> {
    pub fn new(result: &'a SolveResult) -> Self {
        let accepted = result.accepted_steps().count();
        Self {
            status: &result.status,
            achieved_horizon: result.achieved_horizon,
            accepted_steps: accepted,
            rejected_steps: result.steps.len() - accepted,
            total_iterations: result.steps.iter().map(StepReport::iterations).sum(),
            residuals: &result.diagnostics,
            steps: &result.steps,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RoutingEcho {
    pub kind: String,
    pub predictor: String,
    pub tie_policy: Option<String>,
    pub noise: Option<String>,
    pub mc_samples: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Serialize)]
pub struct RunTimings {
    pub wall_seconds: f64,
    #[serde(flatten)]
    pub phases: Timings,
}

/// Everything needed to replay a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub scenario: String,
    pub model: crate::Model,
    pub phys_step: Option<f64>,
    pub routing: RoutingEcho,
    pub config: SolverConfig,
    pub threads: Option<String>,
    pub parallel: bool,
    pub outcome: Option<SolveStatus>,
    pub timings: RunTimings,
}

impl RunManifest {
    pub fn new(args: &SolveArgs, routing: &RoutingOperator, config: &SolverConfig) -> Self {
        let echo = match routing {
            RoutingOperator::Dpe { predictor, tie_policy, .. } => RoutingEcho {
                kind: "dpe".into(),
                predictor: predictor.to_string(),
                tie_policy: Some(tie_policy.to_string()),
                noise: None,
                mc_samples: None,
                seed: None,
            },
            RoutingOperator::Stochastic { predictor, samples, seed, .. } => RoutingEcho {
                kind: serde_json::to_value(args.routing.routing)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
                predictor: predictor.to_string(),
                tie_policy: None,
                noise: args.routing.noise.map(|n| n.to_string()),
                mc_samples: Some(*samples),
                seed: Some(*seed),
            },
        };
        Self {
            version: env!("CARGO_PKG_VERSION"),
            scenario: args.scenario.display().to_string(),
            model: args.physics.model,
            phys_step: args.physics.phys_step,
            routing: echo,
            config: config.clone(),
            threads: std::env::var("DTA_THREADS").ok(),
            parallel: cfg!(feature = "parallel"),
            outcome: None,
            timings: RunTimings::default(),
        }
    }

    pub fn finish(&mut self, result: Option<&SolveResult>, wall_seconds: f64) {
        self.outcome = result.map(|r| r.status.clone());
        self.timings = RunTimings { wall_seconds, phases: result.map(|r| r.timings.clone()).unwrap_or_default() };
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SplitRow<'a> {
    theta: f64,
    node: &'a str,
    commodity: usize,
    edge: usize,
    fraction: f64,
}

/// `splits.csv`: one row per (decision time, node, commodity, edge).
pub fn write_splits(path: &Path, net: &Network, records: &[SplitRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for rec in records {
        for (&edge, &fraction) in rec.edges.iter().zip(&rec.fractions) {
            w.serialize(SplitRow {
                theta: rec.theta,
                node: net.node_name(rec.node),
                commodity: rec.commodity,
                edge,
                fraction,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct QueueRow {
    theta: f64,
    edge: usize,
    occupancy: f64,
}

/// `queues.csv`: queue length (point queue) or volume (linear delay) per edge
/// on a uniform grid.
pub fn write_queues(path: &Path, state: &EdgeState, horizon: f64, step: f64) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let cells = (horizon / step - 1e-9).ceil().max(0.0) as usize;
    for k in 0..=cells {
        let theta = if k == cells { horizon } else { k as f64 * step };
        for edge in 0..state.traces().len() {
            w.serialize(QueueRow { theta, edge, occupancy: state.occupancy(edge, theta) })?;
        }
    }
    w.flush()?;
    Ok(())
}
