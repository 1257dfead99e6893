use proptest::prelude::*;

use dta_core::network::{enumerate_paths, Commodity, Edge, Network, NodeId, Scenario};
use dta_core::ratefn::RateFunction;

/// Random graphs on up to 8 nodes with sink `n − 1` and an inflow at node 0.
fn graph() -> impl Strategy<Value = Network> {
    (3usize..=8).prop_flat_map(|n| {
        let arc = (0..n, 0..n, 0.5..4.0f64, 0.0..2.0f64);
        prop::collection::vec(arc, 1..16).prop_map(move |arcs| {
            let mut edges: Vec<Edge> = arcs
                .into_iter()
                .filter(|(a, b, _, _)| a != b)
                .map(|(from, to, capacity, free_flow_time)| Edge { from, to, capacity, free_flow_time })
                .collect();
            // guarantee reachability of the sink from node 0
            edges.push(Edge { from: 0, to: n - 1, capacity: 1.0, free_flow_time: 1.0 });
            let names = (0..n).map(|k| format!("n{k}")).collect();
            let u = RateFunction::constant(0.0, 1.0, 2.0).unwrap();
            Network::new(names, edges, vec![Commodity { sink: n - 1, inflows: vec![(0, u)] }]).unwrap()
        })
    })
}

/// Naive enumeration of all simple paths as edge sequences.
fn brute_force(
    net: &Network,
    at: NodeId,
    sink: NodeId,
    seen: &mut Vec<NodeId>,
    out: &mut Vec<Vec<usize>>,
    path: &mut Vec<usize>,
) {
    for (e, edge) in net.edges().iter().enumerate() {
        if edge.from != at || seen.contains(&edge.to) {
            continue;
        }
        path.push(e);
        if edge.to == sink {
            out.push(path.clone());
        } else {
            seen.push(edge.to);
            brute_force(net, edge.to, sink, seen, out, path);
            seen.pop();
        }
        path.pop();
    }
}

proptest! {
    #[test]
    fn path_enumeration_is_exhaustive(net in graph()) {
        let sink = net.commodity(0).sink;
        for v in (0..net.node_count()).filter(|&v| v != sink) {
            let mut oracle = Vec::new();
            brute_force(&net, v, sink, &mut vec![v], &mut oracle, &mut Vec::new());
            let mut got: Vec<Vec<usize>> = enumerate_paths(&net, v, 0, 100_000).unwrap().into_iter().map(|p| p.edges).collect();
            oracle.sort();
            got.sort();
            prop_assert_eq!(got, oracle);
        }
    }

    #[test]
    fn scenario_round_trip_is_lossless(net in graph(), horizon in 0.5..20.0f64) {
        let scenario = Scenario { network: net, horizon };
        let back = dta_core::load_network(&scenario.to_json()).unwrap();
        prop_assert_eq!(back, scenario);
    }
}
