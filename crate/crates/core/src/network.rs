//! Network and scenario data model, validation, JSON ingestion and simple-path
//! enumeration.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ratefn::{RateError, RateFunction};

pub type NodeId = usize;
pub type EdgeId = usize;
pub type CommodityId = usize;

pub const DEFAULT_MAX_PATHS: usize = 10_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("malformed scenario JSON at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("scenario does not match the schema at line {line}, column {column}: {message}")]
    Schema { line: usize, column: usize, message: String },
    #[error("duplicate node identifier {0:?}")]
    DuplicateNode(String),
    #[error("edge {edge} references unknown node {node:?}")]
    UnknownNode { edge: usize, node: String },
    #[error("commodity {commodity} references unknown node {node:?}")]
    UnknownCommodityNode { commodity: usize, node: String },
    #[error("edge {edge} has nonpositive capacity {capacity}")]
    NonPositiveCapacity { edge: usize, capacity: f64 },
    #[error("edge {edge} has invalid free-flow time {time}")]
    InvalidFreeFlowTime { edge: usize, time: f64 },
    #[error("edge {0} is a self-loop")]
    SelfLoop(usize),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("commodity {commodity}: inflow at node {node:?} is invalid: {source}")]
    InvalidInflow {
        commodity: usize,
        node: String,
        #[source]
        source: RateError,
    },
    #[error("commodity {commodity}: sink {sink:?} is unreachable from inflow node {node:?}")]
    UnreachableSink { commodity: usize, node: String, sink: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("more than {limit} simple paths from node {node} for commodity {commodity}; raise max_paths")]
    TooManyPaths { node: NodeId, commodity: CommodityId, limit: usize },
    #[error("node {0} is the sink of commodity {1}")]
    SourceIsSink(NodeId, CommodityId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    /// Service rate ν_e (flow units per second).
    pub capacity: f64,
    /// Free-flow travel time c⁰_e (seconds).
    pub free_flow_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Commodity {
    pub sink: NodeId,
    /// Network inflow rates u_{v,i}, at most one entry per node.
    pub inflows: Vec<(NodeId, RateFunction)>,
}

impl Commodity {
    pub fn inflow_at(&self, v: NodeId) -> Option<&RateFunction> {
        self.inflows.iter().find(|(n, _)| *n == v).map(|(_, f)| f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    node_names: Vec<String>,
    edges: Vec<Edge>,
    commodities: Vec<Commodity>,
    out_edges: Vec<Vec<EdgeId>>,
    in_edges: Vec<Vec<EdgeId>>,
}

impl Network {
    /// Builds and validates a network. Inflow/reachability checks happen here;
    /// the horizon lives on [`Scenario`].
    pub fn new(node_names: Vec<String>, edges: Vec<Edge>, commodities: Vec<Commodity>) -> Result<Self, ScenarioError> {
        let n = node_names.len();
        let mut seen = HashMap::new();
        for name in &node_names {
            if seen.insert(name.clone(), ()).is_some() {
                return Err(ScenarioError::DuplicateNode(name.clone()));
            }
        }
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for (k, e) in edges.iter().enumerate() {
            for node in [e.from, e.to] {
                if node >= n {
                    return Err(ScenarioError::UnknownNode { edge: k, node: node.to_string() });
                }
            }
            if e.from == e.to {
                return Err(ScenarioError::SelfLoop(k));
            }
            if !(e.capacity > 0.0) || !e.capacity.is_finite() {
                return Err(ScenarioError::NonPositiveCapacity { edge: k, capacity: e.capacity });
            }
            if !(e.free_flow_time >= 0.0) || !e.free_flow_time.is_finite() {
                return Err(ScenarioError::InvalidFreeFlowTime { edge: k, time: e.free_flow_time });
            }
            out_edges[e.from].push(k);
            in_edges[e.to].push(k);
        }
        let net = Self { node_names, edges, commodities, out_edges, in_edges };
        for (i, c) in net.commodities.iter().enumerate() {
            if c.sink >= n {
                return Err(ScenarioError::UnknownCommodityNode { commodity: i, node: c.sink.to_string() });
            }
            let reach = net.reaches_sink(c.sink);
            for (v, u) in &c.inflows {
                if *v >= n {
                    return Err(ScenarioError::UnknownCommodityNode { commodity: i, node: v.to_string() });
                }
                if !u.is_zero() && !reach[*v] {
                    return Err(ScenarioError::UnreachableSink {
                        commodity: i,
                        node: net.node_names[*v].clone(),
                        sink: net.node_names[c.sink].clone(),
                    });
                }
            }
        }
        Ok(net)
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn commodity_count(&self) -> usize {
        self.commodities.len()
    }

    pub fn node_name(&self, v: NodeId) -> &str {
        &self.node_names[v]
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.node_names.iter().position(|n| n == name)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> &Edge {
        &self.edges[e]
    }

    pub fn commodities(&self) -> &[Commodity] {
        &self.commodities
    }

    pub fn commodity(&self, i: CommodityId) -> &Commodity {
        &self.commodities[i]
    }

    /// δ⁺(v), in increasing edge index.
    pub fn out_edges(&self, v: NodeId) -> &[EdgeId] {
        &self.out_edges[v]
    }

    /// δ⁻(v), in increasing edge index.
    pub fn in_edges(&self, v: NodeId) -> &[EdgeId] {
        &self.in_edges[v]
    }

    pub fn min_free_flow_time(&self) -> f64 {
        self.edges.iter().map(|e| e.free_flow_time).fold(f64::INFINITY, f64::min)
    }

    /// Nodes from which `sink` can be reached (reverse BFS).
    pub fn reaches_sink(&self, sink: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.node_count()];
        mark[sink] = true;
        let mut stack = vec![sink];
        while let Some(w) = stack.pop() {
            for &e in &self.in_edges[w] {
                let v = self.edges[e].from;
                if !mark[v] {
                    mark[v] = true;
                    stack.push(v);
                }
            }
        }
        mark
    }

    /// Total network inflow mass of all commodities.
    pub fn total_inflow_mass(&self) -> f64 {
        self.commodities.iter().flat_map(|c| c.inflows.iter()).map(|(_, u)| u.total_mass()).sum()
    }
}

/// Bitset over edge indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeMask(Vec<u64>);

impl EdgeMask {
    pub fn with_edges(edge_count: usize, edges: &[EdgeId]) -> Self {
        let mut words = vec![0u64; edge_count.div_ceil(64).max(1)];
        for &e in edges {
            words[e / 64] |= 1 << (e % 64);
        }
        Self(words)
    }

    pub fn contains(&self, e: EdgeId) -> bool {
        self.0.get(e / 64).is_some_and(|w| w & (1 << (e % 64)) != 0)
    }
}

/// A simple path as an edge sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub edges: Vec<EdgeId>,
    pub mask: EdgeMask,
}

impl Path {
    pub fn first_edge(&self) -> EdgeId {
        self.edges[0]
    }
}

/// All simple `v → t_i` paths in lexicographic order of their edge sequences.
pub fn enumerate_paths(net: &Network, v: NodeId, i: CommodityId, max_paths: usize) -> Result<Vec<Path>, PathError> {
    let sink = net.commodity(i).sink;
    if v == sink {
        return Err(PathError::SourceIsSink(v, i));
    }
    let reach = net.reaches_sink(sink);
    let mut on_path = vec![false; net.node_count()];
    let mut stack: Vec<EdgeId> = Vec::new();
    let mut out = Vec::new();
    on_path[v] = true;
    dfs(net, v, sink, &reach, &mut on_path, &mut stack, &mut out, max_paths).map_err(|()| PathError::TooManyPaths {
        node: v,
        commodity: i,
        limit: max_paths,
    })?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    net: &Network,
    at: NodeId,
    sink: NodeId,
    reach: &[bool],
    on_path: &mut [bool],
    stack: &mut Vec<EdgeId>,
    out: &mut Vec<Path>,
    max_paths: usize,
) -> Result<(), ()> {
    for &e in net.out_edges(at) {
        let w = net.edge(e).to;
        if on_path[w] || !reach[w] {
            continue;
        }
        stack.push(e);
        if w == sink {
            if out.len() == max_paths {
                return Err(());
            }
            out.push(Path { edges: stack.clone(), mask: EdgeMask::with_edges(net.edge_count(), stack) });
        } else {
            on_path[w] = true;
            dfs(net, w, sink, reach, on_path, stack, out, max_paths)?;
            on_path[w] = false;
        }
        stack.pop();
    }
    Ok(())
}

/// Cached path sets `P_{v,t_i}` for every (node, commodity) pair.
#[derive(Debug, Clone)]
pub struct PathSet {
    commodities: usize,
    entries: Vec<Vec<Path>>,
}

impl PathSet {
    pub fn build(net: &Network, max_paths: usize) -> Result<Self, PathError> {
        let nc = net.commodity_count();
        let mut entries = Vec::with_capacity(net.node_count() * nc);
        for v in 0..net.node_count() {
            for i in 0..nc {
                if v == net.commodity(i).sink {
                    entries.push(Vec::new());
                } else {
                    entries.push(enumerate_paths(net, v, i, max_paths)?);
                }
            }
        }
        Ok(Self { commodities: nc, entries })
    }

    pub fn paths(&self, v: NodeId, i: CommodityId) -> &[Path] {
        &self.entries[v * self.commodities + i]
    }

    /// Whether commodity `i` can be routed from `v` at all.
    pub fn routable(&self, v: NodeId, i: CommodityId) -> bool {
        !self.paths(v, i).is_empty()
    }
}

// ---------------------------------------------------------------------------
// JSON scenario documents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeRef {
    Name(String),
    Index(u64),
}

impl NodeRef {
    fn key(&self) -> String {
        match self {
            NodeRef::Name(s) => s.clone(),
            NodeRef::Index(k) => k.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub from: NodeRef,
    pub to: NodeRef,
    pub capacity: f64,
    pub free_flow_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflowDoc {
    pub node: NodeRef,
    pub pieces: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommodityDoc {
    pub sink: NodeRef,
    #[serde(default)]
    pub inflows: Vec<InflowDoc>,
}

/// On-disk scenario layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub nodes: Vec<NodeRef>,
    pub edges: Vec<EdgeDoc>,
    pub commodities: Vec<CommodityDoc>,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub network: Network,
    pub horizon: f64,
}

impl Scenario {
    pub fn from_doc(doc: ScenarioDoc) -> Result<Self, ScenarioError> {
        if !(doc.horizon > 0.0) || !doc.horizon.is_finite() {
            return Err(ScenarioError::InvalidHorizon(doc.horizon));
        }
        let names: Vec<String> = doc.nodes.iter().map(NodeRef::key).collect();
        let index: HashMap<&str, NodeId> = names.iter().enumerate().map(|(k, n)| (n.as_str(), k)).collect();
        if index.len() != names.len() {
            let mut seen = HashMap::new();
            for n in &names {
                if seen.insert(n, ()).is_some() {
                    return Err(ScenarioError::DuplicateNode(n.clone()));
                }
            }
        }
        let mut edges = Vec::with_capacity(doc.edges.len());
        for (k, e) in doc.edges.iter().enumerate() {
            let lookup = |r: &NodeRef| {
                index
                    .get(r.key().as_str())
                    .copied()
                    .ok_or_else(|| ScenarioError::UnknownNode { edge: k, node: r.key() })
            };
            edges.push(Edge {
                from: lookup(&e.from)?,
                to: lookup(&e.to)?,
                capacity: e.capacity,
                free_flow_time: e.free_flow_time,
            });
        }
        let mut commodities = Vec::with_capacity(doc.commodities.len());
        for (i, c) in doc.commodities.iter().enumerate() {
            let lookup = |r: &NodeRef| {
                index
                    .get(r.key().as_str())
                    .copied()
                    .ok_or_else(|| ScenarioError::UnknownCommodityNode { commodity: i, node: r.key() })
            };
            let sink = lookup(&c.sink)?;
            let mut inflows: Vec<(NodeId, RateFunction)> = Vec::new();
            for u in &c.inflows {
                let v = lookup(&u.node)?;
                let rate = RateFunction::try_from(u.pieces.clone()).map_err(|source| ScenarioError::InvalidInflow {
                    commodity: i,
                    node: u.node.key(),
                    source,
                })?;
                if let Some((_, existing)) = inflows.iter_mut().find(|(n, _)| *n == v) {
                    *existing = crate::ratefn::combine(&[existing.clone(), rate], &[1.0, 1.0])
                        .expect("sum of nonnegative rates");
                } else {
                    inflows.push((v, rate));
                }
            }
            commodities.push(Commodity { sink, inflows });
        }
        let network = Network::new(names, edges, commodities)?;
        Ok(Self { network, horizon: doc.horizon })
    }

    pub fn to_doc(&self) -> ScenarioDoc {
        let net = &self.network;
        let name = |v: NodeId| NodeRef::Name(net.node_name(v).to_string());
        ScenarioDoc {
            nodes: net.node_names().iter().map(|n| NodeRef::Name(n.clone())).collect(),
            edges: net
                .edges()
                .iter()
                .map(|e| EdgeDoc {
                    from: name(e.from),
                    to: name(e.to),
                    capacity: e.capacity,
                    free_flow_time: e.free_flow_time,
                })
                .collect(),
            commodities: net
                .commodities()
                .iter()
                .map(|c| CommodityDoc {
                    sink: name(c.sink),
                    inflows: c
                        .inflows
                        .iter()
                        .map(|(v, u)| InflowDoc { node: name(*v), pieces: u.clone().into() })
                        .collect(),
                })
                .collect(),
            horizon: self.horizon,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("scenario documents always serialize")
    }
}

/// Parses and validates a scenario document.
pub fn load_network(document: &str) -> Result<Scenario, ScenarioError> {
    let doc: ScenarioDoc = serde_json::from_str(document).map_err(|err| {
        let (line, column, message) = (err.line(), err.column(), err.to_string());
        match err.classify() {
            serde_json::error::Category::Data => ScenarioError::Schema { line, column, message },
            _ => ScenarioError::Parse { line, column, message },
        }
    })?;
    Scenario::from_doc(doc)
}
