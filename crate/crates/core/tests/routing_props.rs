use proptest::prelude::*;

use dta_core::network::{Commodity, Edge, Network, Path, PathSet};
use dta_core::par::Exec;
use dta_core::routing::{
    active_from_costs, decompose_split, estimate_pi_from_costs, stochastic_split, ActiveSetProbabilities, NoiseDist,
    NoiseModel, DEFAULT_TIE_TOL,
};

/// `direct` parallel edges `s → t` plus a detour `s → m` with `via` edges `m → t`.
fn diamond(direct: usize, via: usize) -> Network {
    let e = |from, to| Edge { from, to, capacity: 1.0, free_flow_time: 1.0 };
    let mut edges: Vec<Edge> = (0..direct).map(|_| e(0, 2)).collect();
    edges.push(e(0, 1));
    edges.extend((0..via).map(|_| e(1, 2)));
    Network::new(vec!["s".into(), "m".into(), "t".into()], edges, vec![Commodity { sink: 2, inflows: vec![] }]).unwrap()
}

fn noise() -> impl Strategy<Value = NoiseDist> {
    prop_oneof![
        (0.05..1.0f64).prop_map(|sigma| NoiseDist::Gaussian { sigma }),
        (0.05..1.0f64).prop_map(|w| NoiseDist::Uniform { low: -w, high: w }),
    ]
}

/// A small instance: network, its paths out of `s`, and one base cost per path.
fn instance() -> impl Strategy<Value = (Network, Vec<Path>, Vec<f64>)> {
    (1usize..=2, 1usize..=2).prop_flat_map(|(direct, via)| {
        let net = diamond(direct, via);
        let paths = PathSet::build(&net, 16).unwrap().paths(0, 0).to_vec();
        let n = paths.len();
        prop::collection::vec(0.0..3.0f64, n).prop_map(move |base| (net.clone(), paths.clone(), base))
    })
}

fn pi(
    net: &Network,
    paths: &[Path],
    base: &[f64],
    dist: NoiseDist,
    samples: usize,
    seed: u64,
) -> ActiveSetProbabilities {
    let noise = NoiseModel::iid(dist, net).unwrap();
    estimate_pi_from_costs(net, paths, base, &noise, 0, 0, 0.5, samples, seed, Exec::default()).unwrap()
}

fn masks(d: usize) -> impl Iterator<Item = u32> {
    1..1u32 << d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pi_is_a_distribution_over_nonempty_sets((net, paths, base) in instance(), dist in noise(), seed in any::<u64>()) {
        let p = pi(&net, &paths, &base, dist, 3000, seed);
        prop_assert_eq!(p.pi(0), 0.0);
        prop_assert!(p.probs.iter().all(|&x| x >= 0.0));
        let tally: u64 = p.probs.iter().map(|&x| (x * p.samples as f64).round() as u64).sum();
        prop_assert_eq!(tally, p.samples as u64);
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rho_is_monotone_under_inclusion((net, paths, base) in instance(), dist in noise(), seed in any::<u64>()) {
        let p = pi(&net, &paths, &base, dist, 2000, seed);
        let d = p.degree();
        for m in masks(d) {
            for sup in masks(d).filter(|s| s & m == m) {
                prop_assert!(p.rho_mask(m) <= p.rho_mask(sup), "rho({:b}) > rho({:b})", m, sup);
            }
        }
        prop_assert!((p.rho_mask((1 << d) - 1) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn identical_queries_are_bit_identical((net, paths, base) in instance(), dist in noise(), seed in any::<u64>()) {
        let noise = NoiseModel::iid(dist, &net).unwrap();
        let run = |exec| estimate_pi_from_costs(&net, &paths, &base, &noise, 0, 0, 0.5, 5000, seed, exec).unwrap();
        let a = run(Exec::Parallel);
        prop_assert_eq!(&a, &run(Exec::Parallel));
        prop_assert_eq!(&a, &run(Exec::Sequential));
    }

    /// Dyadic costs and shifts keep `base + c` exact, so every perceived cost moves by the same amount.
    #[test]
    fn common_shift_leaves_active_sets_unchanged(
        (net, paths, base) in instance(),
        dist in noise(),
        shift in -64i32..64,
        seed in any::<u64>(),
    ) {
        let base: Vec<f64> = base.iter().map(|c| (c * 16.0).round() / 16.0).collect();
        let shifted: Vec<f64> = base.iter().map(|c| c + f64::from(shift) / 8.0).collect();
        let active = |costs: &[f64]| {
            active_from_costs(&net, 0, 0, 0.5, paths.iter().map(|p| p.first_edge()).zip(costs.iter().copied()), DEFAULT_TIE_TOL)
                .active
        };
        prop_assert_eq!(active(&base), active(&shifted));
        prop_assert_eq!(pi(&net, &paths, &base, dist, 2000, seed).probs, pi(&net, &paths, &shifted, dist, 2000, seed).probs);
    }

    #[test]
    fn small_noise_recovers_the_argmin_indicator((net, paths, base) in instance(), seed in any::<u64>()) {
        let best = base.iter().copied().fold(f64::INFINITY, f64::min);
        let runner_up = base.iter().copied().filter(|&c| c > best).fold(f64::INFINITY, f64::min);
        let winners = base.iter().filter(|&&c| c == best).count();
        prop_assume!(winners == 1 && runner_up - best >= 0.02);

        let p = pi(&net, &paths, &base, NoiseDist::Gaussian { sigma: 1e-3 }, 20_000, seed);
        let k = paths.iter().zip(&base).find(|(_, &c)| c == best).map(|(q, _)| q.first_edge()).unwrap();
        let split = stochastic_split(&p);
        for (e, r) in p.out_edges.iter().zip(&split) {
            let indicator = if *e == k { 1.0 } else { 0.0 };
            prop_assert!((r - indicator).abs() <= 0.01, "edge {}: {} vs {}", e, r, indicator);
        }
    }

    #[test]
    fn membership_matches_subset_inequalities(
        raw_pi in prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], 7),
        raw_r in prop::collection::vec(0.0..1.0f64, 3),
        d in 1usize..=3,
        scale in prop_oneof![Just(1.0), 0.8..1.2f64],
    ) {
        let mut weights: Vec<f64> = std::iter::once(0.0).chain(raw_pi).take(1 << d).collect();
        if weights.iter().all(|&w| w == 0.0) {
            weights[(1 << d) - 1] = 1.0;
        }
        let total: f64 = weights.iter().sum();
        let edges: Vec<usize> = (0..d).collect();
        let subsets: Vec<(Vec<usize>, f64)> = masks(d)
            .filter(|&m| weights[m as usize] > 0.0)
            .map(|m| ((0..d).filter(|&k| m >> k & 1 == 1).collect(), weights[m as usize] / total))
            .collect();
        let borrowed: Vec<(&[usize], f64)> = subsets.iter().map(|(s, p)| (s.as_slice(), *p)).collect();
        let probs = ActiveSetProbabilities::from_subsets(edges, &borrowed).unwrap();

        let r_total: f64 = raw_r[..d].iter().sum::<f64>().max(1e-9);
        let r: Vec<f64> = raw_r[..d].iter().map(|x| x / r_total * scale).collect();

        // exhaustive check over all subsets
        let rho = |m: u32| -> f64 { masks(d).filter(|s| s & !m == 0).map(|s| probs.pi(s)).sum() };
        let hall = masks(d).all(|m| (0..d).filter(|&k| m >> k & 1 == 1).map(|k| r[k]).sum::<f64>() >= rho(m) - 1e-9);
        let sums = (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9;

        let verdict = decompose_split(&r, &probs);
        prop_assert_eq!(verdict.is_feasible(), hall && sums);
    }
}
