//! Edge-loading operators Φ: map edge inflow rates to edge outflow rates.
//!
//! Two physical models ship with the crate, [`Vickrey`] point queues and
//! [`LinearDelay`] affine volume-delay dynamics. Both report their per-edge
//! state as an occupancy function (queue length or edge volume) from which
//! travel times `c_e(θ) = c⁰_e + occupancy_e(θ)/ν_e` follow. Routing and the
//! solver only talk to the [`EdgeLoader`] trait, so further models can be
//! plugged in.

mod linear_delay;
mod vickrey;

pub use linear_delay::{travel_time_residual, LinearDelay, DEFAULT_STEP_DIVISOR};
pub use vickrey::Vickrey;

use thiserror::Error;

use crate::network::{CommodityId, EdgeId, Network};
use crate::ratefn::{self, CumulativeFunction, PiecewiseLinear, RateFunction};

/// Slack allowed when querying travel times right at the computed horizon.
const HORIZON_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadError {
    #[error("non-finite inflow on edge {edge}")]
    NonFinite { edge: EdgeId },
    #[error("edge {edge} violates the model precondition: {reason}")]
    ModelPrecondition { edge: EdgeId, reason: String },
    #[error("exit-time function of edge {edge} is not strictly increasing near t = {time}")]
    NonMonotoneExitTime { edge: EdgeId, time: f64 },
    #[error("time {time} lies beyond the computed horizon {horizon}")]
    OutOfHorizon { time: f64, horizon: f64 },
    #[error("flow has {got} components, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Per-(edge, commodity) rate functions, stored edge-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFlows {
    edges: usize,
    commodities: usize,
    rates: Vec<RateFunction>,
}

impl EdgeFlows {
    pub fn zeros(edges: usize, commodities: usize) -> Self {
        Self { edges, commodities, rates: vec![RateFunction::zero(); edges * commodities] }
    }

    pub fn for_network(net: &Network) -> Self {
        Self::zeros(net.edge_count(), net.commodity_count())
    }

    pub fn from_rates(edges: usize, commodities: usize, rates: Vec<RateFunction>) -> Result<Self, LoadError> {
        if rates.len() != edges * commodities {
            return Err(LoadError::DimensionMismatch { expected: edges * commodities, got: rates.len() });
        }
        Ok(Self { edges, commodities, rates })
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    pub fn commodity_count(&self) -> usize {
        self.commodities
    }

    pub fn get(&self, e: EdgeId, i: CommodityId) -> &RateFunction {
        &self.rates[e * self.commodities + i]
    }

    pub fn set(&mut self, e: EdgeId, i: CommodityId, f: RateFunction) {
        self.rates[e * self.commodities + i] = f;
    }

    /// Commodity rates of edge `e`.
    pub fn edge(&self, e: EdgeId) -> &[RateFunction] {
        &self.rates[e * self.commodities..(e + 1) * self.commodities]
    }

    pub fn rates(&self) -> &[RateFunction] {
        &self.rates
    }

    /// Aggregate rate `Σ_i f_{e,i}`.
    pub fn aggregate(&self, e: EdgeId) -> RateFunction {
        let coeffs = vec![1.0; self.commodities];
        ratefn::combine(self.edge(e), &coeffs).expect("sum of nonnegative rates")
    }

    pub fn map(&self, f: impl Fn(&RateFunction) -> RateFunction) -> Self {
        Self { edges: self.edges, commodities: self.commodities, rates: self.rates.iter().map(f).collect() }
    }

    pub fn restricted(&self, a: f64, b: f64) -> Self {
        self.map(|f| ratefn::restrict(f, a, b))
    }

    pub fn check_dimensions(&self, net: &Network) -> Result<(), LoadError> {
        let expected = net.edge_count() * net.commodity_count();
        if self.edges != net.edge_count() || self.commodities != net.commodity_count() {
            return Err(LoadError::DimensionMismatch { expected, got: self.rates.len() });
        }
        Ok(())
    }
}

/// A dynamic flow: edge inflow and outflow rates per commodity.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub inflow: EdgeFlows,
    pub outflow: EdgeFlows,
}

impl Flow {
    pub fn zero(net: &Network) -> Self {
        Self { inflow: EdgeFlows::for_network(net), outflow: EdgeFlows::for_network(net) }
    }

    pub fn cumulative_inflow(&self, e: EdgeId, i: CommodityId) -> CumulativeFunction {
        self.inflow.get(e, i).cumulative()
    }

    pub fn cumulative_outflow(&self, e: EdgeId, i: CommodityId) -> CumulativeFunction {
        self.outflow.get(e, i).cumulative()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupancyKind {
    /// Vickrey queue length z_e.
    PointQueue,
    /// Flow volume X_e on the edge.
    Volume,
}

/// Physical state of one edge over the computed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTrace {
    pub kind: OccupancyKind,
    pub capacity: f64,
    pub free_flow_time: f64,
    pub occupancy: PiecewiseLinear,
    /// Aggregate outflow rate; used for volume slopes.
    pub aggregate_outflow: RateFunction,
}

impl EdgeTrace {
    fn travel_time(&self, theta: f64) -> f64 {
        self.free_flow_time + self.occupancy.evaluate(theta).max(0.0) / self.capacity
    }
}

/// Access to travel times; the only view predictors get of the physics.
pub trait TravelTimes {
    fn travel_time(&self, e: EdgeId, theta: f64) -> Result<f64, LoadError>;
    fn horizon(&self) -> f64;

    fn exit_time(&self, e: EdgeId, theta: f64) -> Result<f64, LoadError> {
        Ok(theta + self.travel_time(e, theta)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState {
    traces: Vec<EdgeTrace>,
    horizon: f64,
}

impl EdgeState {
    pub fn new(traces: Vec<EdgeTrace>, horizon: f64) -> Self {
        Self { traces, horizon }
    }

    pub fn trace(&self, e: EdgeId) -> &EdgeTrace {
        &self.traces[e]
    }

    pub fn traces(&self) -> &[EdgeTrace] {
        &self.traces
    }

    pub fn occupancy(&self, e: EdgeId, theta: f64) -> f64 {
        self.traces[e].occupancy.evaluate(theta).max(0.0)
    }

    /// Right derivative of `c_e` at `θ` if the aggregate inflow rate into `e`
    /// right after `θ` is `inflow`.
    pub fn cost_slope(&self, e: EdgeId, theta: f64, inflow: f64) -> f64 {
        self.slope_profile(e, theta, 0.0).at(inflow)
    }

    /// Cost slope of `e` at `θ` as a function of the extra inflow `x` on top
    /// of `other` already entering.
    pub fn slope_profile(&self, e: EdgeId, theta: f64, other: f64) -> SlopeProfile {
        let tr = &self.traces[e];
        let nu = tr.capacity;
        match tr.kind {
            OccupancyKind::PointQueue if self.occupancy(e, theta) <= queue_eps(nu) && other < nu => {
                SlopeProfile { base: 0.0, flat: nu - other, capacity: nu }
            }
            OccupancyKind::PointQueue => SlopeProfile { base: (other - nu) / nu, flat: 0.0, capacity: nu },
            OccupancyKind::Volume => {
                SlopeProfile { base: (other - tr.aggregate_outflow.evaluate(theta)) / nu, flat: 0.0, capacity: nu }
            }
        }
    }

    /// Time at which a positive queue on `e` runs empty if the aggregate inflow
    /// stays at `inflow`; `None` for volume models or non-draining queues.
    pub fn depletion_time(&self, e: EdgeId, theta: f64, inflow: f64) -> Option<f64> {
        let tr = &self.traces[e];
        if tr.kind != OccupancyKind::PointQueue {
            return None;
        }
        let z = self.occupancy(e, theta);
        (z > queue_eps(tr.capacity) && inflow < tr.capacity).then(|| theta + z / (tr.capacity - inflow))
    }
}

/// `x ↦ base + max(x − flat, 0)/capacity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeProfile {
    pub base: f64,
    pub flat: f64,
    pub capacity: f64,
}

impl SlopeProfile {
    pub fn at(&self, x: f64) -> f64 {
        self.base + (x - self.flat).max(0.0) / self.capacity
    }
}

pub(crate) fn queue_eps(capacity: f64) -> f64 {
    1e-12 * capacity.max(1.0)
}

impl TravelTimes for EdgeState {
    fn travel_time(&self, e: EdgeId, theta: f64) -> Result<f64, LoadError> {
        if theta > self.horizon + HORIZON_SLACK {
            return Err(LoadError::OutOfHorizon { time: theta, horizon: self.horizon });
        }
        Ok(self.traces[e].travel_time(theta))
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Causality data of a loader on a particular network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoaderMetadata {
    /// min_e c⁰_e: outputs up to T + offset only depend on inputs before T.
    pub causality_offset: f64,
    pub is_uniformly_strictly_causal: bool,
    pub capacity_bound: f64,
}

impl LoaderMetadata {
    pub fn from_network(net: &Network) -> Self {
        let offset = net.min_free_flow_time();
        let offset = if offset.is_finite() { offset } else { 0.0 };
        Self {
            causality_offset: offset,
            is_uniformly_strictly_causal: offset > 0.0,
            capacity_bound: net.edges().iter().map(|e| e.capacity).fold(0.0, f64::max),
        }
    }
}

/// Result of one loading pass.
#[derive(Debug, Clone)]
pub struct Loading {
    pub outflow: EdgeFlows,
    pub state: EdgeState,
}

pub trait EdgeLoader: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Rejects networks the model cannot handle.
    fn validate(&self, _net: &Network) -> Result<(), LoadError> {
        Ok(())
    }

    /// Computes `Φ(inflow)`; outputs are exact (Vickrey) or grid-accurate on
    /// `[0, horizon]`.
    fn load(&self, net: &Network, inflow: &EdgeFlows, horizon: f64) -> Result<Loading, LoadError>;

    fn metadata(&self, net: &Network) -> LoaderMetadata {
        LoaderMetadata::from_network(net)
    }
}

/// Built-in model selection, as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Vickrey,
    LinearDelay { step: Option<f64> },
}

impl ModelKind {
    pub fn loader(self) -> Box<dyn EdgeLoader> {
        match self {
            ModelKind::Vickrey => Box::new(Vickrey::default()),
            ModelKind::LinearDelay { step } => Box::new(LinearDelay { step, ..Default::default() }),
        }
    }
}

/// `‖f⁻_{e,i} − Φ(f⁺)_{e,i}‖₁` on `[0, horizon]` per component (edge-major).
pub fn consistency_residual(
    net: &Network,
    flow: &Flow,
    loader: &dyn EdgeLoader,
    horizon: f64,
) -> Result<Vec<f64>, LoadError> {
    flow.inflow.check_dimensions(net)?;
    flow.outflow.check_dimensions(net)?;
    let loaded = loader.load(net, &flow.inflow, horizon)?;
    Ok(flow
        .outflow
        .rates()
        .iter()
        .zip(loaded.outflow.rates())
        .map(|(f, g)| ratefn::distance(f, g, 0.0, horizon, ratefn::Norm::L1))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Commodity, Edge};

    fn single_edge(capacity: f64, free_flow_time: f64) -> Network {
        Network::new(
            vec!["s".into(), "t".into()],
            vec![Edge { from: 0, to: 1, capacity, free_flow_time }],
            vec![Commodity { sink: 1, inflows: vec![] }],
        )
        .unwrap()
    }

    #[test]
    fn consistency_residual_examples() {
        let net = single_edge(1.0, 1.0);
        let loader = Vickrey::default();
        let mut flow = Flow::zero(&net);
        assert_eq!(consistency_residual(&net, &flow, &loader, 5.0).unwrap(), vec![0.0]);

        flow.inflow.set(0, 0, RateFunction::constant(0.0, 1.0, 2.0).unwrap());
        flow.outflow = loader.load(&net, &flow.inflow, 5.0).unwrap().outflow;
        assert!(consistency_residual(&net, &flow, &loader, 5.0).unwrap()[0] <= 1e-9);

        let bumped = ratefn::combine(
            &[flow.outflow.get(0, 0).clone(), RateFunction::constant(1.0, 2.0, 0.1).unwrap()],
            &[1.0, 1.0],
        )
        .unwrap();
        flow.outflow.set(0, 0, bumped);
        let r = consistency_residual(&net, &flow, &loader, 5.0).unwrap()[0];
        assert!((r - 0.1).abs() < 1e-12, "{r}");
    }

    #[test]
    fn travel_time_beyond_horizon_errors() {
        let net = single_edge(1.0, 1.0);
        let loaded = Vickrey::default().load(&net, &EdgeFlows::for_network(&net), 2.0).unwrap();
        assert_eq!(loaded.state.travel_time(0, 1.0).unwrap(), 1.0);
        assert!(matches!(loaded.state.travel_time(0, 3.0), Err(LoadError::OutOfHorizon { .. })));
    }

    #[test]
    fn metadata_reports_causality() {
        let meta = LoaderMetadata::from_network(&single_edge(3.0, 0.5));
        assert_eq!(meta.causality_offset, 0.5);
        assert!(meta.is_uniformly_strictly_causal);
        assert_eq!(meta.capacity_bound, 3.0);
        assert!(!LoaderMetadata::from_network(&single_edge(1.0, 0.0)).is_uniformly_strictly_causal);
    }
}
