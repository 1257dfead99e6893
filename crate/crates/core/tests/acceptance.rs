//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dta_core::edge_loading::{travel_time_residual, EdgeFlows, EdgeLoader, LinearDelay, Vickrey};
use dta_core::network::{Commodity, Edge, Network, PathSet};
use dta_core::par::Exec;
use dta_core::predictors::Predictor;
use dta_core::ratefn::{self, Norm, RateFunction};
use dta_core::routing::{
    decompose_split, estimate_pi, ActiveSetProbabilities, Membership, NoiseDist, NoiseModel, RoutingOperator, TiePolicy,
};
use dta_core::solver::{
    banach_iterate, equilibrium_gap, solve, BanachOptions, BanachStatus, Diagnostics, InitialGuess, SolveResult,
    SolverConfig, StepController,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fig_network(horizon: f64) -> Network {
    let e = |from, to, capacity| Edge { from, to, capacity, free_flow_time: 1.0 };
    Network::new(
        vec!["s".into(), "v".into(), "w".into(), "t".into()],
        vec![e(0, 1, 4.0), e(1, 3, 2.0), e(0, 2, 2.0), e(2, 3, 2.0)],
        vec![Commodity { sink: 3, inflows: vec![(0, RateFunction::constant(0.0, horizon, 6.0).unwrap())] }],
    )
    .unwrap()
}

fn parallel_pair(free_flow: [f64; 2], capacity: f64, inflow: Option<RateFunction>) -> Network {
    let edges = free_flow.iter().map(|&c| Edge { from: 0, to: 1, capacity, free_flow_time: c }).collect();
    let inflows = inflow.map(|u| vec![(0, u)]).unwrap_or_default();
    Network::new(vec!["s".into(), "t".into()], edges, vec![Commodity { sink: 1, inflows }]).unwrap()
}

fn single_edge(capacity: f64, free_flow_time: f64, inflow: RateFunction) -> Network {
    Network::new(
        vec!["s".into(), "t".into()],
        vec![Edge { from: 0, to: 1, capacity, free_flow_time }],
        vec![Commodity { sink: 1, inflows: vec![(0, inflow)] }],
    )
    .unwrap()
}

fn single_inflow(net: &Network, f: RateFunction) -> EdgeFlows {
    let mut flows = EdgeFlows::for_network(net);
    flows.set(0, 0, f);
    flows
}

/// Diagnostics of every solve run by the suite, checked by criterion 9.
type Ledger = Vec<(String, Diagnostics)>;

fn golden_ide(ledger: &mut Ledger) -> Outcome {
    let net = fig_network(3.0);
    let config = SolverConfig { routing_step: 0.05, ..SolverConfig::with_horizon(3.0) };
    let clock = Instant::now();
    let res = solve(&net, &Vickrey::default(), &RoutingOperator::ide(TiePolicy::Balanced), &config).unwrap();
    let seconds = clock.elapsed().as_secs_f64();
    ledger.push(("golden IDE".into(), res.diagnostics.clone()));

    let mut split_err: f64 = 0.0;
    for k in 0..300 {
        let t = (k as f64 + 0.5) / 100.0;
        let upper = if (1.0..2.0).contains(&t) { 1.0 / 3.0 } else { 2.0 / 3.0 };
        split_err = split_err.max((res.split.fractions.get(0, 0).evaluate(t) - upper).abs());
        split_err = split_err.max((res.split.fractions.get(2, 0).evaluate(t) - (1.0 - upper)).abs());
    }
    let mut queue_err: f64 = 0.0;
    for k in 0..=20 {
        let t = 1.0 + k as f64 / 20.0;
        queue_err = queue_err.max((res.state.occupancy(1, t) - 2.0 * (t - 1.0)).abs());
    }
    queue_err = queue_err.max((res.state.occupancy(2, 2.0) - 2.0).abs());
    let pass = res.completed() && split_err <= 1e-6 && queue_err <= 1e-6 && seconds < 1.0;
    outcome(pass, format!("split error {split_err:.1e}, queue error {queue_err:.1e}, {seconds:.3} s"))
}

/// Cumulative `∫_0^t u` of raw pieces.
fn cumulative(pieces: &[(f64, f64, f64)], t: f64) -> f64 {
    pieces.iter().map(|&(a, b, v)| v * (t.min(b) - a).max(0.0)).sum()
}

/// Fine-step point-queue simulation: free-flow delay then a capacity-limited
/// FIFO queue. Returns outflow rates per step.
fn marching_oracle(pieces: &[(f64, f64, f64)], capacity: f64, delay: f64, horizon: f64, dt: f64) -> Vec<f64> {
    let steps = (horizon / dt).round() as usize;
    let mut queue = 0.0;
    (0..steps)
        .map(|k| {
            let t = k as f64 * dt;
            queue += cumulative(pieces, t + dt - delay) - cumulative(pieces, t - delay);
            let out = queue.min(capacity * dt);
            queue -= out;
            out / dt
        })
        .collect()
}

/// `∫ |f − g|` with `g` constant on each step of length `dt`.
fn l1_against_steps(f: &RateFunction, steps: &[f64], dt: f64) -> f64 {
    let bps = f.breakpoints();
    let mut err = 0.0;
    for (k, &g) in steps.iter().enumerate() {
        let (a, b) = (k as f64 * dt, (k + 1) as f64 * dt);
        let mut cuts = vec![a];
        let from = bps.partition_point(|&x| x <= a);
        cuts.extend(bps[from..].iter().copied().take_while(|&x| x < b));
        cuts.push(b);
        for w in cuts.windows(2) {
            err += (f.evaluate(w[0]) - g).abs() * (w[1] - w[0]);
        }
    }
    err
}

fn vickrey_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clock = Instant::now();
    let (mut worst, mut invariant_breaks) = (0.0_f64, 0usize);
    for _ in 0..200 {
        let capacity = rng.random_range(0.5..3.0);
        let delay = rng.random_range(0.1..2.0);
        let mut pieces = Vec::new();
        let mut t = rng.random_range(0.0..0.5);
        for _ in 0..rng.random_range(1..=5) {
            let len = rng.random_range(0.1..1.5);
            pieces.push((t, t + len, rng.random_range(0.0..4.0)));
            t += len + if rng.random_bool(0.3) { rng.random_range(0.0..1.0) } else { 0.0 };
        }
        let mass = cumulative(&pieces, f64::INFINITY);
        let horizon = (t + delay + mass / capacity + 1.0).ceil();
        let u = RateFunction::from_pieces(&pieces).unwrap();
        let net = single_edge(capacity, delay, u.clone());
        let loading = Vickrey::default().load(&net, &single_inflow(&net, u), horizon).unwrap();
        let out = loading.outflow.get(0, 0);

        let dt = 1e-4;
        let oracle = marching_oracle(&pieces, capacity, delay, horizon, dt);
        worst = worst.max(l1_against_steps(out, &oracle, dt));
        if out.values().iter().any(|&v| v > capacity) {
            invariant_breaks += 1;
        }
        let probes = out.breakpoints().iter().copied().chain((0..=400).map(|k| horizon * k as f64 / 400.0));
        if probes.into_iter().any(|t| loading.state.occupancy(0, t) < 0.0) {
            invariant_breaks += 1;
        }
    }
    let seconds = clock.elapsed().as_secs_f64();
    let pass = worst <= 1e-2 && invariant_breaks == 0 && seconds < 30.0;
    outcome(pass, format!("max L1 error {worst:.2e}, invariant violations {invariant_breaks}, {seconds:.2} s"))
}

fn linear_delay_residual() -> Outcome {
    let (capacity, delay, horizon) = (3.0, 1.0, 10.0);
    let u = RateFunction::constant(0.0, horizon, 1.0).unwrap();
    let net = single_edge(capacity, delay, u.clone());
    let inflow = single_inflow(&net, u);
    let residual = |step: f64| {
        let loader = LinearDelay { step: Some(step), ..Default::default() };
        let loading = loader.load(&net, &inflow, horizon).unwrap();
        travel_time_residual(inflow.edge(0), loading.outflow.edge(0), &loading.state, 0, 400)
    };
    let (raw, normalized) = residual(delay / 40.0);
    let (raw_half, _) = residual(delay / 80.0);
    let ratio = raw / raw_half;
    let pass = normalized <= 1e-3 && ratio >= 1.8;
    outcome(pass, format!("residual {raw:.3e} (per unit flow {normalized:.3e}), halving ratio {ratio:.2}"))
}

/// `P(U₁ − U₂ < x)` for independent uniform(−½, ½) variables.
fn triangular_cdf(x: f64) -> f64 {
    match x {
        x if x <= -1.0 => 0.0,
        x if x <= 0.0 => 0.5 * (1.0 + x) * (1.0 + x),
        x if x < 1.0 => 1.0 - 0.5 * (1.0 - x) * (1.0 - x),
        _ => 1.0,
    }
}

fn pi_oracle() -> Outcome {
    let singleton = |free_flow: [f64; 2], dist: NoiseDist| {
        let net = parallel_pair(free_flow, 1.0, None);
        let paths = PathSet::build(&net, 10).unwrap();
        let state = Vickrey::default().load(&net, &EdgeFlows::for_network(&net), 10.0).unwrap().state;
        let noise = NoiseModel::iid(dist, &net).unwrap();
        let pi =
            estimate_pi(&net, &paths, &Predictor::Constant, &state, &noise, 0, 0, 0.0, 200_000, 5, Exec::default())
                .unwrap();
        pi.pi(pi.mask_of(&[0]).unwrap())
    };
    let uniform = singleton([1.0, 1.2], NoiseDist::Uniform { low: -0.5, high: 0.5 });
    let gaussian = singleton([1.0, 1.0], NoiseDist::Gaussian { sigma: 0.5 });
    let expected = triangular_cdf(0.2);
    let pass = (uniform - expected).abs() <= 0.01 && (gaussian - 0.5).abs() <= 0.01;
    outcome(pass, format!("uniform pi {uniform:.4} (exact {expected:.4}), gaussian pi {gaussian:.4} (exact 0.5)"))
}

fn rho_exhaustive(pi: &[f64], mask: usize) -> f64 {
    (1..pi.len()).filter(|&s| s & !mask == 0).map(|s| pi[s]).sum()
}

fn membership_lemma() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut mismatches, mut marginal_err, mut feasible_count) = (0usize, 0.0_f64, 0usize);
    for trial in 0..1000 {
        let d = rng.random_range(1..=3usize);
        let mut pi: Vec<f64> = (0..1usize << d)
            .map(|m| if m == 0 || rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        if pi.iter().all(|&p| p == 0.0) {
            pi[(1 << d) - 1] = 1.0;
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);

        let mut r = vec![0.0; d];
        match trial % 3 {
            // a random decomposition, hence feasible
            0 => {
                for (m, &p) in pi.iter().enumerate() {
                    let members: Vec<usize> = (0..d).filter(|&k| m >> k & 1 == 1).collect();
                    let mut w: Vec<f64> = members.iter().map(|_| rng.random_range(0.0..1.0)).collect();
                    let s: f64 = w.iter().sum::<f64>().max(1e-300);
                    w.iter_mut().for_each(|x| *x /= s);
                    for (&k, x) in members.iter().zip(w) {
                        r[k] += p * x;
                    }
                }
            }
            1 => {
                r.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= s);
            }
            _ => {
                r.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
                let s: f64 = r.iter().sum::<f64>() / rng.random_range(0.8..1.2);
                r.iter_mut().for_each(|x| *x /= s);
            }
        }

        let edges: Vec<usize> = (0..d).collect();
        let entries: Vec<(Vec<usize>, f64)> = (1..1usize << d)
            .filter(|&m| pi[m] > 0.0)
            .map(|m| ((0..d).filter(|&k| m >> k & 1 == 1).collect(), pi[m]))
            .collect();
        let borrowed: Vec<(&[usize], f64)> = entries.iter().map(|(s, p)| (s.as_slice(), *p)).collect();
        let probs = ActiveSetProbabilities::from_subsets(edges.clone(), &borrowed).unwrap();

        let sums_match = (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        let hall = (1..1usize << d).all(|m| {
            let mass: f64 = (0..d).filter(|&k| m >> k & 1 == 1).map(|k| r[k]).sum();
            mass >= rho_exhaustive(&pi, m) - 1e-9
        });
        let verdict = decompose_split(&r, &probs);
        if verdict.is_feasible() != (sums_match && hall) {
            mismatches += 1;
        }
        if let Membership::Feasible(dec) = verdict {
            feasible_count += 1;
            for m in 1..1u32 << d {
                marginal_err = marginal_err.max((dec.subset_total(m) - pi[m as usize]).abs());
            }
            for (k, rk) in r.iter().enumerate() {
                marginal_err = marginal_err.max((dec.edge_total(k) - rk).abs());
            }
            if dec.weights.iter().any(|&(m, e, w)| w < 0.0 || m >> e & 1 == 0) {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0 && marginal_err <= 1e-9;
    outcome(
        pass,
        format!(
            "{mismatches} verdict mismatches in 1000 ({feasible_count} feasible), marginal error {marginal_err:.1e}"
        ),
    )
}

fn fixed_point_fixtures() -> Outcome {
    let sup = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let attempt = |alpha: f64| {
        let ts: Vec<f64> = (0..=200).map(|k| alpha * k as f64 / 200.0).collect();
        let psi = |x: &Vec<f64>| Ok::<_, ()>(ts.iter().zip(x).map(|(t, v)| t * v + 1.0).collect::<Vec<f64>>());
        let opts = BanachOptions { tol: 1e-12, ..Default::default() };
        let out = banach_iterate(psi, sup, vec![0.0; ts.len()], &opts).unwrap();
        let err = ts.iter().zip(&out.value).map(|(t, v)| (v - 1.0 / (1.0 - t)).abs()).fold(0.0, f64::max);
        (out.status, err)
    };
    let mut controller = StepController::new(1.0, 0.25, 1.5);
    let (long_status, _) = attempt(controller.alpha());
    let rejected = long_status != BanachStatus::Converged && controller.reject().is_ok();
    let (short_status, err) = attempt(controller.alpha());
    let pass = rejected && short_status == BanachStatus::Converged && controller.alpha() == 0.5 && err <= 1e-8;
    outcome(pass, format!("[0,1] {long_status:?} and rejected; [0,0.5] {short_status:?} with sup error {err:.1e}"))
}

fn vanishing_noise(ledger: &mut Ledger) -> Outcome {
    let horizon = 2.0;
    let net = parallel_pair([1.0, 1.02], 10.0, Some(RateFunction::constant(0.0, horizon, 1.0).unwrap()));
    let paths = PathSet::build(&net, 10).unwrap();
    let config = SolverConfig { routing_step: 0.05, ..SolverConfig::with_horizon(horizon) };
    let mass = 1.0 * horizon;
    let mut gaps = Vec::new();
    for sigma in [0.1, 0.01, 0.001] {
        let noise = NoiseModel::iid(NoiseDist::Gaussian { sigma }, &net).unwrap();
        let routing = RoutingOperator::stochastic_ide(noise, 20_000, 17);
        let res = solve(&net, &Vickrey::default(), &routing, &config).unwrap();
        let gap = equilibrium_gap(
            &net,
            &paths,
            &Vickrey::default(),
            &RoutingOperator::ide(TiePolicy::Balanced),
            &res.flow,
            horizon,
            config.routing_step,
            Exec::default(),
        )
        .unwrap();
        ledger.push((format!("stochastic IDE sigma {sigma}"), res.diagnostics));
        gaps.push(gap.value);
    }
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let last = *gaps.last().unwrap();
    let pass = decreasing && last <= 0.02 * mass;
    let shown: Vec<String> = gaps.iter().map(|g| format!("{g:.3e}")).collect();
    outcome(pass, format!("DPE gaps [{}], bound {:.3e}", shown.join(", "), 0.02 * mass))
}

fn total_l1(a: &SolveResult, b: &SolveResult, horizon: f64) -> f64 {
    a.flow
        .inflow
        .rates()
        .iter()
        .zip(b.flow.inflow.rates())
        .map(|(f, g)| ratefn::distance(f, g, 0.0, horizon, Norm::L1))
        .sum()
}

fn uniqueness_probe(ledger: &mut Ledger) -> Outcome {
    let horizon = 5.0;
    let net = fig_network(horizon);
    let noise = NoiseModel::iid(NoiseDist::Gaussian { sigma: 0.5 }, &net).unwrap();
    let routing = RoutingOperator::stochastic_ide(noise, 20_000, 23);
    let run = |initial_guess| {
        let config = SolverConfig { initial_guess, ..SolverConfig::with_horizon(horizon) };
        solve(&net, &Vickrey::default(), &routing, &config).unwrap()
    };
    let zero = run(InitialGuess::Zero);
    let extrapolated = run(InitialGuess::Extrapolate);
    let tol = 10.0 * SolverConfig::default().tol_fp;
    let diff = total_l1(&zero, &extrapolated, horizon);
    let pass = zero.completed() && extrapolated.completed() && diff <= tol;
    ledger.push(("uniqueness, zero guess".into(), zero.diagnostics));
    ledger.push(("uniqueness, extrapolated guess".into(), extrapolated.diagnostics));
    outcome(pass, format!("L1 difference {diff:.2e} (tolerance {tol:.0e})"))
}

fn linear_delay_solve(ledger: &mut Ledger) {
    let net = fig_network(3.0);
    let config = SolverConfig { routing_step: 0.025, alpha_min: 0.025, ..SolverConfig::with_horizon(3.0) };
    let res = solve(&net, &LinearDelay::default(), &RoutingOperator::ide(TiePolicy::Balanced), &config).unwrap();
    ledger.push(("linear-delay IDE".into(), res.diagnostics));
}

fn residuals(ledger: &Ledger) -> Outcome {
    let worst = ledger
        .iter()
        .map(|(name, d)| (name, d.conservation_per_unit.max(d.consistency_per_unit)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    match worst {
        Some((name, w)) => outcome(w <= 1e-6, format!("{} solves, worst {w:.1e} ({name})", ledger.len())),
        None => outcome(false, "no solves recorded".into()),
    }
}

fn main() -> ExitCode {
    let mut ledger = Ledger::new();
    let mut all_pass = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all_pass &= o.pass;
        println!("[{}] criterion {n}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "golden IDE trajectory", golden_ide(&mut ledger));
    report(2, "Vickrey vs fine-step oracle", vickrey_oracle());
    report(3, "linear-delay travel-time residual", linear_delay_residual());
    report(4, "active-set probabilities vs analytic values", pi_oracle());
    report(5, "max-flow membership", membership_lemma());
    report(6, "scalar fixed-point fixtures", fixed_point_fixtures());
    report(7, "vanishing noise", vanishing_noise(&mut ledger));
    report(8, "uniqueness probe", uniqueness_probe(&mut ledger));
    linear_delay_solve(&mut ledger);
    report(9, "conservation and consistency residuals", residuals(&ledger));
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
