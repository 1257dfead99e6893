use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dta_core::edge_loading::{EdgeLoader, LinearDelay, Vickrey};
use dta_core::network::{PathSet, Scenario, DEFAULT_MAX_PATHS};
use dta_core::predictors::Predictor;
use dta_core::routing::{NoiseDist, NoiseModel, RoutingOperator, TiePolicy, DEFAULT_SAMPLES, DEFAULT_TIE_TOL};
use dta_core::solver::{self, Diagnostics, SolveResult, SolveStatus, SolverConfig};

mod output;

use output::{FlowDoc, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "dta", version, about = "Coherent dynamic traffic flows: solve and verify scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute a coherent flow and write flow, splits, queues, diagnostics and manifest to DIR.
    Solve(SolveArgs),
    /// Recompute residuals and equilibrium gap of a supplied flow.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Model {
    Vickrey,
    LinearDelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RoutingKind {
    /// Deterministic prediction equilibrium with the chosen predictor.
    Dpe,
    /// Stochastic prediction equilibrium with the chosen predictor.
    Spe,
    /// Stochastic routing on the constant predictor.
    StochasticIde,
}

#[derive(Debug, Clone, Args)]
struct PhysicsArgs {
    #[arg(long, value_enum, default_value = "vickrey")]
    model: Model,
    /// Grid step of the linear-delay model (default min free-flow time / 40).
    #[arg(long)]
    phys_step: Option<f64>,
}

#[derive(Debug, Clone, Args)]
struct RoutingArgs {
    #[arg(long, value_enum, default_value = "dpe")]
    routing: RoutingKind,
    /// constant | perfect | composite:<cutoff>
    #[arg(long, default_value = "constant")]
    predictor: Predictor,
    /// gaussian:<sigma> | uniform:<a>,<b>
    #[arg(long)]
    noise: Option<NoiseDist>,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// uniform | sticky | balanced
    #[arg(long, default_value = "balanced")]
    tie_policy: TiePolicy,
}

#[derive(Debug, Clone, Args)]
struct SolveArgs {
    scenario: PathBuf,
    #[command(flatten)]
    physics: PhysicsArgs,
    #[command(flatten)]
    routing: RoutingArgs,
    /// Defaults to the scenario horizon.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    alpha0: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha_min: f64,
    #[arg(long, default_value_t = 1e-9)]
    fp_tol: f64,
    #[arg(long, default_value_t = 0.05)]
    routing_step: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct VerifyArgs {
    scenario: PathBuf,
    flow: PathBuf,
    #[command(flatten)]
    physics: PhysicsArgs,
    #[command(flatten)]
    routing: RoutingArgs,
    #[arg(long, default_value_t = 0.05)]
    routing_step: f64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Invalid(anyhow::Error),
    Solver(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Solver(_) => 3,
        }
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

fn failed(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Solver(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Solve(args) => run_solve(&args),
        Command::Verify(args) => run_verify(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Invalid(e) | Failure::Solver(e)) = &failure;
            eprintln!("error: {e:#}");
            ExitCode::from(failure.code())
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("DTA_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(anyhow!("DTA_THREADS must be a positive integer, got {value:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(invalid)?;
    #[cfg(not(feature = "parallel"))]
    log::info!("built without parallelism; DTA_THREADS={threads} has no effect");
    Ok(())
}

fn read_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(invalid)?;
    dta_core::load_network(&text).with_context(|| format!("in scenario {}", path.display())).map_err(invalid)
}

fn loader(physics: &PhysicsArgs) -> Result<Box<dyn EdgeLoader>, Failure> {
    match physics.model {
        Model::Vickrey => {
            if physics.phys_step.is_some() {
                log::warn!("--phys-step is ignored by the vickrey model");
            }
            Ok(Box::new(Vickrey::default()))
        }
        Model::LinearDelay => {
            if let Some(step) = physics.phys_step {
                if !(step > 0.0 && step.is_finite()) {
                    return Err(invalid(anyhow!("--phys-step must be positive, got {step}")));
                }
            }
            Ok(Box::new(LinearDelay { step: physics.phys_step, ..Default::default() }))
        }
    }
}

fn routing_operator(args: &RoutingArgs, scenario: &Scenario) -> Result<RoutingOperator, Failure> {
    let stochastic = |predictor: Predictor| {
        let dist = args.noise.ok_or_else(|| invalid(anyhow!("stochastic routing needs --noise")))?;
        let noise = NoiseModel::iid(dist, &scenario.network).map_err(invalid)?;
        Ok(RoutingOperator::Stochastic { predictor, noise, samples: args.mc_samples, seed: args.seed })
    };
    match args.routing {
        RoutingKind::Dpe => {
            if args.noise.is_some() {
                log::warn!("--noise is ignored by deterministic routing");
            }
            Ok(RoutingOperator::Dpe {
                predictor: args.predictor.clone(),
                tie_policy: args.tie_policy,
                tie_tol: DEFAULT_TIE_TOL,
            })
        }
        RoutingKind::Spe => stochastic(args.predictor.clone()),
        RoutingKind::StochasticIde => {
            if !matches!(args.predictor, Predictor::Constant) {
                log::warn!(
                    "stochastic-ide always uses the constant predictor; ignoring --predictor {}",
                    args.predictor
                );
            }
            stochastic(Predictor::Constant)
        }
    }
}

fn run_solve(args: &SolveArgs) -> Result<(), Failure> {
    let wall = Instant::now();
    let scenario = read_scenario(&args.scenario)?;
    let net = &scenario.network;
    let loader = loader(&args.physics)?;
    let routing = routing_operator(&args.routing, &scenario)?;
    let config = SolverConfig {
        horizon: args.horizon.unwrap_or(scenario.horizon),
        alpha0: args.alpha0,
        alpha_min: args.alpha_min,
        tol_fp: args.fp_tol,
        routing_step: args.routing_step,
        max_iter: args.max_iter,
        ..Default::default()
    };
    config.validate().map_err(invalid)?;
    solver::validate_setup(net, loader.as_ref(), &routing).map_err(invalid)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))
        .map_err(invalid)?;

    let mut manifest = RunManifest::new(args, &routing, &config);
    let result = match solver::solve(net, loader.as_ref(), &routing, &config) {
        Ok(r) => r,
        Err(e) => {
            manifest.finish(None, wall.elapsed().as_secs_f64());
            output::write_json(&args.out.join("manifest.json"), &manifest).map_err(failed)?;
            return Err(failed(e));
        }
    };
    manifest.finish(Some(&result), wall.elapsed().as_secs_f64());
    write_outputs(&args.out, &scenario, &result, &manifest, config.routing_step).map_err(failed)?;

    let d = &result.diagnostics;
    eprintln!(
        "horizon {} of {}: gap {:.3e}, conservation {:.3e}, consistency {:.3e}",
        result.achieved_horizon, config.horizon, d.gap.value, d.max_conservation, d.max_consistency
    );
    match &result.status {
        SolveStatus::Completed => Ok(()),
        SolveStatus::Failed { time, reason } => Err(failed(anyhow!(
            "solver stopped at t = {time} (partial outputs written to {}): {reason}",
            args.out.display()
        ))),
    }
}

fn write_outputs(
    dir: &Path,
    scenario: &Scenario,
    result: &SolveResult,
    manifest: &RunManifest,
    grid: f64,
) -> anyhow::Result<()> {
    output::write_json(&dir.join("flow.json"), &FlowDoc::from_flow(&result.flow, result.achieved_horizon))?;
    output::write_splits(&dir.join("splits.csv"), &scenario.network, &result.records)?;
    output::write_queues(&dir.join("queues.csv"), &result.state, result.achieved_horizon, grid)?;
    output::write_json(&dir.join("diagnostics.json"), &output::DiagnosticsDoc::new(result))?;
    output::write_json(&dir.join("manifest.json"), manifest)
}

fn run_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let scenario = read_scenario(&args.scenario)?;
    let net = &scenario.network;
    let text = std::fs::read_to_string(&args.flow)
        .with_context(|| format!("reading {}", args.flow.display()))
        .map_err(invalid)?;
    let doc: FlowDoc = serde_json::from_str(&text)
        .map_err(|e| anyhow!("malformed flow JSON at line {}, column {}: {e}", e.line(), e.column()))
        .map_err(invalid)?;
    let (flow, horizon) = doc.into_flow(net).map_err(invalid)?;
    let loader = loader(&args.physics)?;
    let routing = routing_operator(&args.routing, &scenario)?;
    loader.validate(net).map_err(invalid)?;
    if !(args.routing_step > 0.0 && args.routing_step.is_finite()) {
        return Err(invalid(anyhow!("--routing-step must be positive")));
    }
    let paths = PathSet::build(net, DEFAULT_MAX_PATHS).map_err(invalid)?;
    let config = SolverConfig { horizon, routing_step: args.routing_step, ..Default::default() };
    let report =
        Diagnostics::compute(net, &paths, loader.as_ref(), &routing, &flow, horizon, &config).map_err(failed)?;
    let json = serde_json::to_string_pretty(&report).map_err(failed)?;
    println!("{json}");
    if let Some(path) = &args.out {
        output::write_json(path, &report).map_err(failed)?;
    }
    Ok(())
}
