use proptest::prelude::*;

use dta_core::edge_loading::Vickrey;
use dta_core::network::{Commodity, Edge, Network};
use dta_core::ratefn::{self, Norm, RateFunction};
use dta_core::routing::{NoiseDist, NoiseModel, RoutingOperator, TiePolicy};
use dta_core::solver::{solve, SolveResult, SolverConfig};

/// Two routes `s → v → t` and `s → w → t` with a bottleneck on the first.
fn diamond(inflow: RateFunction) -> Network {
    let e = |from, to, capacity| Edge { from, to, capacity, free_flow_time: 1.0 };
    Network::new(
        vec!["s".into(), "v".into(), "w".into(), "t".into()],
        vec![e(0, 1, 4.0), e(1, 3, 2.0), e(0, 2, 2.0), e(2, 3, 2.0)],
        vec![Commodity { sink: 3, inflows: vec![(0, inflow)] }],
    )
    .unwrap()
}

/// Piecewise-constant inflow on `[0, 3)` with breakpoints on the 0.25 grid.
fn inflow() -> impl Strategy<Value = RateFunction> {
    prop::collection::vec((1u32..=4, 0.0..8.0f64), 1..4).prop_map(|raw| {
        let mut t = 0.0;
        let mut pieces = Vec::new();
        for (quarters, v) in raw {
            let end = (t + 0.25 * f64::from(quarters)).min(3.0);
            if end > t {
                pieces.push((t, end, v));
            }
            t = end;
        }
        RateFunction::from_pieces(&pieces).unwrap()
    })
}

fn stochastic(sigma: f64, seed: u64) -> RoutingOperator {
    let net = diamond(RateFunction::zero());
    RoutingOperator::stochastic_ide(NoiseModel::iid(NoiseDist::Gaussian { sigma }, &net).unwrap(), 2000, seed)
}

fn config(horizon: f64, routing_step: f64) -> SolverConfig {
    SolverConfig { routing_step, alpha_min: routing_step, ..SolverConfig::with_horizon(horizon) }
}

fn check_residuals(res: &SolveResult, tol: f64) -> Result<(), TestCaseError> {
    for step in &res.steps {
        let tail = step.residuals.iter().position(|&r| r < 10.0 * tol).map_or(&[][..], |k| &step.residuals[k..]);
        for w in tail.windows(2) {
            prop_assert!(w[1] <= w[0], "step [{}, {}]: residual rose {} -> {}", step.start, step.end, w[0], w[1]);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn residuals_never_rise_near_convergence(u in inflow(), sigma in 0.1..1.0f64, seed in any::<u64>()) {
        let net = diamond(u);
        let cfg = config(4.0, 0.05);
        let dpe = solve(&net, &Vickrey::default(), &RoutingOperator::ide(TiePolicy::Balanced), &cfg).unwrap();
        prop_assert!(dpe.completed());
        check_residuals(&dpe, cfg.tol_fp)?;
        let spe = solve(&net, &Vickrey::default(), &stochastic(sigma, seed), &cfg).unwrap();
        prop_assert!(spe.completed());
        check_residuals(&spe, cfg.tol_fp)?;
    }

    #[test]
    fn same_seed_gives_bit_identical_results(u in inflow(), seed in any::<u64>()) {
        let net = diamond(u);
        let cfg = config(3.0, 0.05);
        let a = solve(&net, &Vickrey::default(), &stochastic(0.3, seed), &cfg).unwrap();
        let b = solve(&net, &Vickrey::default(), &stochastic(0.3, seed), &cfg).unwrap();
        prop_assert_eq!(a.flow.inflow.rates(), b.flow.inflow.rates());
        prop_assert_eq!(a.flow.outflow.rates(), b.flow.outflow.rates());
        prop_assert_eq!(a.split.fractions.rates(), b.split.fractions.rates());
        prop_assert_eq!(a.records, b.records);
        prop_assert_eq!(a.steps, b.steps);
    }
}

#[test]
fn golden_splits_survive_grid_refinement() {
    let net = diamond(RateFunction::constant(0.0, 3.0, 6.0).unwrap());
    let routing = RoutingOperator::ide(TiePolicy::Balanced);
    let coarse = solve(&net, &Vickrey::default(), &routing, &config(3.0, 0.05)).unwrap();
    let fine = solve(&net, &Vickrey::default(), &routing, &config(3.0, 0.025)).unwrap();
    assert!(coarse.completed() && fine.completed());
    for (a, b) in coarse.split.fractions.rates().iter().zip(fine.split.fractions.rates()) {
        let d = ratefn::distance(a, b, 0.0, 3.0, Norm::L1);
        assert!(d <= 1e-4, "splits moved by {d}");
    }
    for (a, b) in coarse.flow.inflow.rates().iter().zip(fine.flow.inflow.rates()) {
        assert!(ratefn::distance(a, b, 0.0, 3.0, Norm::L1) <= 1e-4);
    }
}
