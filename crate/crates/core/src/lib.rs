//! Coherent dynamic traffic flows.
//!
//! A flow is *coherent* when its edge outflows are what the physical
//! edge-loading model produces from its edge inflows, its node splits are
//! admissible for the behavioural routing operator, and flow is conserved at
//! every node. This crate computes such flows for Vickrey point queues and
//! affine volume-delay edges, under deterministic prediction routing (IDE and
//! relatives) and stochastic prediction routing with noisy path costs.
//!
//! The solver advances the horizon in short steps; within a step it runs a
//! fixed-point iteration for the new inflows while everything before the step
//! stays pinned.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod edge_loading;
pub mod network;
pub mod par;
pub mod predictors;
pub mod ratefn;
pub mod routing;
pub mod solver;

pub use edge_loading::{EdgeFlows, EdgeLoader, EdgeState, Flow, LinearDelay, ModelKind, TravelTimes, Vickrey};
pub use network::{load_network, Network, PathSet, Scenario};
pub use ratefn::{CumulativeFunction, Norm, PiecewiseLinear, RateFunction};
