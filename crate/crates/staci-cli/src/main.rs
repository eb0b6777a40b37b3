//! Batch front end: simulate synthetic stream-network data, run calibrated
//! prediction-region experiments, and sweep hyperparameter grids.

mod grid;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use manifest::RunManifest;
use staci_core::harness::calibration_tailup_fit;
use staci_core::*;

#[derive(Parser)]
#[command(
    name = "staci",
    version,
    about = "Topology-aware conformal prediction regions on directed stream networks",
    long_about = "Builds jointly calibrated prediction regions for multivariate forecasts on \
                  directed stream networks, blending the sample residual covariance with a \
                  covariance induced by the network topology. `alpha` below is the target \
                  miscoverage level: alpha = 0.05 requests 95% coverage."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for seed replications and grid cells (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic observations and their exact noise covariance.
    Simulate(SimulateArgs),
    /// Run one method over replicated seeds and write results plus traces.
    Run(RunCmdArgs),
    /// Run a lambda/ncal/gamma grid across methods and seeds.
    Sweep(SweepCmdArgs),
}

#[derive(Args)]
struct NetworkArgs {
    /// Network CSV, or `preset:figure1` for the built-in 5-segment network.
    #[arg(long)]
    network: String,
    /// Sites CSV (row order defines the dimension order). Not needed with a preset.
    #[arg(long)]
    sites: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    network: NetworkArgs,
    /// AR coefficients of the temporal mean, e.g. `0.7,0.3` (use `0,0` for pure noise).
    #[arg(long, default_value = "0,0")]
    theta: String,
    /// Total time steps to generate (burn-in included; see the manifest).
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Quadrature sub-intervals per segment.
    #[arg(long, default_value_t = 300)]
    subintervals: usize,
    /// Headwater extension length as a multiple of segment length.
    #[arg(long, default_value_t = 10.0)]
    extension: f64,
    /// Output directory.
    #[arg(long, env = "STACI_OUT_DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Observations CSV (header `t,<site ids...>`).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Externally produced predictions CSV with the observation-file schema.
    #[arg(long, requires = "data")]
    predictions: Option<PathBuf>,
    /// Leading rows of --data to drop (e.g. simulator burn-in).
    #[arg(long, default_value_t = 0, requires = "data")]
    drop_first: usize,
    /// Ground-truth covariance CSV, required by `--method gt` with file data.
    #[arg(long)]
    true_cov: Option<PathBuf>,
    /// Simulate per-seed data instead of reading files: AR coefficients, e.g. `0.7,0.3`.
    #[arg(long, value_name = "THETA")]
    synthetic: Option<String>,
    /// Synthetic steps to generate (default: sized to fit the split plus burn-in).
    #[arg(long, requires = "synthetic")]
    steps: Option<usize>,
    /// Synthetic quadrature sub-intervals per segment.
    #[arg(long, default_value_t = 300)]
    subintervals: usize,
    /// Synthetic headwater extension factor.
    #[arg(long, default_value_t = 10.0)]
    extension: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Target miscoverage level (0.05 requests 95% coverage).
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Blend weight between sample (0) and topology (1) precision.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Adaptive confidence-level step size (0 disables adaptation).
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    /// Calibration window size.
    #[arg(long, default_value_t = 300)]
    ncal: usize,
    /// Test horizon length.
    #[arg(long, default_value_t = 5000)]
    ntest: usize,
    /// Leading fraction of rows used to train the forecaster.
    #[arg(long, default_value_t = 0.6)]
    split: f64,
    /// online: slide the calibration window and refresh covariances;
    /// offline: freeze them at test start.
    #[arg(long, default_value = "online")]
    mode: String,
    /// Online covariance refresh period, in test steps.
    #[arg(long, default_value_t = 1)]
    refit_every: usize,
    /// Number of replication seeds.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// First replication seed.
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    /// AR order of the internal forecaster.
    #[arg(long, default_value_t = 2)]
    ar_order: usize,
    /// Fit one AR model per site instead of pooling.
    #[arg(long)]
    ar_per_site: bool,
    /// Include an intercept in the AR fit.
    #[arg(long)]
    ar_intercept: bool,
    /// Output directory.
    #[arg(long, env = "STACI_OUT_DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct RunCmdArgs {
    #[command(flatten)]
    network: NetworkArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Region method: staci | sample | sphere | square | gt.
    #[arg(long, default_value = "staci")]
    method: String,
}

#[derive(Args)]
struct SweepCmdArgs {
    #[command(flatten)]
    network: NetworkArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Grid axes: `lambda=0:1:0.02`, `ncal=100,200,300`, `gamma=0,0.01`.
    #[arg(long, value_name = "AXIS", num_args = 1..)]
    grid: Vec<String>,
    /// Comma-separated methods to sweep.
    #[arg(long, default_value = "staci")]
    methods: String,
}

enum CliError {
    /// Bad arguments or argument combinations: exit 2.
    Usage(String),
    /// Failures while reading inputs or running: exit 1.
    Runtime(String),
    /// Some grid cells or seeds failed: exit 1 after writing partial results.
    Partial(String),
}

impl CliError {
    fn report(self) -> ExitCode {
        match self {
            CliError::Usage(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
            CliError::Runtime(msg) | CliError::Partial(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
        }
    }
}

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            return CliError::Runtime(format!("cannot configure {jobs} worker threads: {e}")).report();
        }
    }
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn parse_theta(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("cannot parse AR coefficient from {v:?}")))
        })
        .collect()
}

fn resolve_network(args: &NetworkArgs) -> Result<StreamNetwork, CliError> {
    if let Some(preset) = args.network.strip_prefix("preset:") {
        return match preset {
            "figure1" => Ok(figure1_network()),
            other => Err(CliError::Usage(format!("unknown preset {other:?}"))),
        };
    }
    let sites_path = args
        .sites
        .as_ref()
        .ok_or_else(|| CliError::Usage("file-based networks need --sites".into()))?;
    let segments = io::read_network_csv(Path::new(&args.network)).map_err(runtime)?;
    let sites = io::read_sites_csv(sites_path).map_err(runtime)?;
    build_network(segments, sites).map_err(runtime)
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create output directory {out:?}: {e}")))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let net = resolve_network(&args.network)?;
    let mut cfg = SimConfig::new(parse_theta(&args.theta)?, args.steps, args.seed);
    cfg.subintervals_per_segment = args.subintervals;
    cfg.headwater_extension_factor = args.extension;
    let output = simulate(&net, &cfg).map_err(runtime)?;

    ensure_out_dir(&args.out)?;
    let site_names: Vec<String> = net.sites().iter().map(|s| s.id.clone()).collect();
    let timestamps: Vec<u64> = (0..args.steps as u64).collect();
    io::write_observations_csv(
        &args.out.join("observations.csv"),
        &timestamps,
        &site_names,
        &output.observations,
    )
    .map_err(runtime)?;
    io::write_matrix_csv(&args.out.join("true_covariance.csv"), &output.true_covariance)
        .map_err(runtime)?;
    io::write_network_csv(&args.out.join("network.csv"), net.segments()).map_err(runtime)?;
    io::write_sites_csv(&args.out.join("sites.csv"), net.sites()).map_err(runtime)?;

    let mut manifest = RunManifest::new(
        "simulate",
        json!({
            "theta": args.theta,
            "steps": args.steps,
            "seed": args.seed,
            "subintervals": args.subintervals,
            "extension": args.extension,
            "burn_in": output.burn_in,
        }),
    );
    manifest.input("network", &args.network.network);
    manifest.seeds = vec![args.seed];
    for name in ["observations.csv", "true_covariance.csv", "network.csv", "sites.csv"] {
        manifest.output(name);
    }
    manifest.write(&args.out).map_err(runtime)?;
    println!(
        "simulated {} steps x {} sites (burn-in {}) into {}",
        args.steps,
        net.site_count(),
        output.burn_in,
        args.out.display()
    );
    Ok(())
}

struct ResolvedExperiment {
    net: StreamNetwork,
    source: DataSource,
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
}

fn resolve_experiment(
    network: &NetworkArgs,
    data: &DataArgs,
    exp: &ExperimentArgs,
    needs_true_cov: bool,
) -> Result<ResolvedExperiment, CliError> {
    let net = resolve_network(network)?;
    let mode: Mode = exp.mode.parse().map_err(CliError::Usage)?;
    let cfg = ExperimentConfig {
        split: exp.split,
        n_cal: exp.ncal,
        n_test: exp.ntest,
        alpha: exp.alpha,
        lambda: exp.lambda,
        gamma: exp.gamma,
        mode,
        refit_every: exp.refit_every,
        forecast: ForecastSpec {
            order: exp.ar_order,
            shared: !exp.ar_per_site,
            intercept: exp.ar_intercept,
        },
    };

    let source = match (&data.data, &data.synthetic) {
        (Some(path), None) => {
            let obs = io::read_observations_csv(path).map_err(runtime)?;
            let expected: Vec<String> = net.sites().iter().map(|s| s.id.clone()).collect();
            if obs.site_names != expected {
                return Err(CliError::Runtime(format!(
                    "observation columns {:?} do not match the network site order {:?}",
                    obs.site_names, expected
                )));
            }
            let predictions = data
                .predictions
                .as_ref()
                .map(|p| load_external_predictions(p, &obs).map(|series| series.predictions))
                .transpose()
                .map_err(runtime)?;
            if data.drop_first >= obs.values.nrows() {
                return Err(CliError::Usage("--drop-first removes every row".into()));
            }
            let keep = obs.values.nrows() - data.drop_first;
            let true_covariance = data
                .true_cov
                .as_ref()
                .map(|p| io::read_matrix_csv(p))
                .transpose()
                .map_err(runtime)?;
            if needs_true_cov && true_covariance.is_none() {
                return Err(CliError::Usage("--method gt with file data requires --true-cov".into()));
            }
            DataSource::Fixed(Arc::new(ExperimentData {
                observations: obs.values.rows(data.drop_first, keep).into_owned(),
                external_predictions: predictions
                    .map(|p| p.rows(data.drop_first, keep).into_owned()),
                true_covariance,
            }))
        }
        (None, Some(theta)) => {
            let mut spec = SyntheticSpec::new(parse_theta(theta)?);
            spec.n_steps = data.steps;
            spec.subintervals = data.subintervals;
            spec.extension = data.extension;
            DataSource::Synthetic(spec)
        }
        (None, None) => {
            return Err(CliError::Usage("provide --data <file> or --synthetic <theta>".into()))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };

    let seeds: Vec<u64> = (0..exp.seeds as u64).map(|k| exp.seed_base + k).collect();
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    Ok(ResolvedExperiment { net, source, cfg, seeds })
}

fn experiment_config_json(exp: &ExperimentArgs, cfg: &ExperimentConfig) -> serde_json::Value {
    json!({
        "alpha": cfg.alpha,
        "lambda": cfg.lambda,
        "gamma": cfg.gamma,
        "ncal": cfg.n_cal,
        "ntest": cfg.n_test,
        "split": cfg.split,
        "mode": cfg.mode.name(),
        "refit_every": cfg.refit_every,
        "ar_order": cfg.forecast.order,
        "ar_shared": cfg.forecast.shared,
        "ar_intercept": cfg.forecast.intercept,
        "seeds": exp.seeds,
        "seed_base": exp.seed_base,
    })
}

fn cmd_run(args: RunCmdArgs) -> Result<(), CliError> {
    let method: Method = args.method.parse().map_err(CliError::Usage)?;
    let resolved = resolve_experiment(
        &args.network,
        &args.data,
        &args.experiment,
        method == Method::GroundTruth,
    )?;
    let ResolvedExperiment { net, source, cfg, seeds } = resolved;
    let out = &args.experiment.out;
    ensure_out_dir(out)?;

    let runs: Vec<(u64, Result<MetricsReport, String>)> = seeds
        .par_iter()
        .map(|&seed| {
            let run = source
                .realize(&net, seed, &cfg)
                .and_then(|data| run_experiment(&data, &net, &cfg, method))
                .map_err(|e| e.to_string());
            (seed, run)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut trace_files = Vec::new();
    for (seed, run) in &runs {
        match run {
            Ok(report) => {
                rows.push(ResultRow {
                    method: method.name().to_string(),
                    lambda: cfg.lambda,
                    n_cal: cfg.n_cal,
                    gamma: cfg.gamma,
                    mode: cfg.mode.name().to_string(),
                    seed: *seed,
                    coverage: report.coverage,
                    efficiency: report.efficiency,
                    n_fullspace: report.n_fullspace,
                });
                let name = format!("trace_seed{seed}.csv");
                io::write_trace_csv(&out.join(&name), &report.trace).map_err(runtime)?;
                trace_files.push(name);
            }
            Err(e) => failures.push((*seed, e.clone())),
        }
    }
    io::write_results_csv(&out.join("results.csv"), &rows).map_err(runtime)?;

    // The fitted covariance-scaling parameters are part of the run artifacts
    // when the method estimates them.
    let mut wrote_params = false;
    if method == Method::Staci && cfg.lambda > 0.0 {
        if let Some(first) = seeds.first() {
            if let Ok(data) = source.realize(&net, *first, &cfg) {
                if let Ok(params) = calibration_tailup_fit(&data, &net, &cfg) {
                    io::write_tailup_params(&out.join("tailup.params"), &params).map_err(runtime)?;
                    wrote_params = true;
                }
            }
        }
    }

    let mut manifest = RunManifest::new(
        "run",
        json!({
            "method": method.name(),
            "experiment": experiment_config_json(&args.experiment, &cfg),
            "data": data_args_json(&args.data),
        }),
    );
    manifest.input("network", &args.network.network);
    if let Some(sites) = &args.network.sites {
        manifest.input("sites", sites.display());
    }
    if let Some(data) = &args.data.data {
        manifest.input("data", data.display());
    }
    if let Some(p) = &args.data.predictions {
        manifest.input("predictions", p.display());
    }
    if let Some(p) = &args.data.true_cov {
        manifest.input("true_cov", p.display());
    }
    manifest.seeds = seeds.clone();
    manifest.output("results.csv");
    for t in &trace_files {
        manifest.output(t);
    }
    if wrote_params {
        manifest.output("tailup.params");
    }
    manifest.write(out).map_err(runtime)?;

    println!("wrote {} result rows to {}", rows.len(), out.join("results.csv").display());
    if failures.is_empty() {
        Ok(())
    } else {
        for (seed, e) in &failures {
            eprintln!("seed {seed} failed: {e}");
        }
        Err(CliError::Partial(format!("{} of {} seeds failed", failures.len(), seeds.len())))
    }
}

fn data_args_json(data: &DataArgs) -> serde_json::Value {
    json!({
        "synthetic": data.synthetic,
        "steps": data.steps,
        "subintervals": data.subintervals,
        "extension": data.extension,
        "drop_first": data.drop_first,
    })
}

fn cmd_sweep(args: SweepCmdArgs) -> Result<(), CliError> {
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .map(|m| m.trim().parse().map_err(CliError::Usage))
        .collect::<Result<_, _>>()?;
    let needs_true_cov = methods.contains(&Method::GroundTruth);
    let grid = grid::parse_axes(&args.grid).map_err(CliError::Usage)?;
    let resolved = resolve_experiment(&args.network, &args.data, &args.experiment, needs_true_cov)?;
    let ResolvedExperiment { net, source, cfg, seeds } = resolved;
    let out = &args.experiment.out;
    ensure_out_dir(out)?;

    let outcome = sweep(&source, &net, &cfg, &grid, &methods, &seeds);
    io::write_results_csv(&out.join("results.csv"), &outcome.rows).map_err(runtime)?;
    if !outcome.failures.is_empty() {
        io::write_failures_csv(&out.join("errors.csv"), &outcome.failures).map_err(runtime)?;
    }

    let mut manifest = RunManifest::new(
        "sweep",
        json!({
            "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "grid": {
                "lambda": grid.lambdas,
                "ncal": grid.n_cals,
                "gamma": grid.gammas,
            },
            "experiment": experiment_config_json(&args.experiment, &cfg),
            "data": data_args_json(&args.data),
        }),
    );
    manifest.input("network", &args.network.network);
    if let Some(data) = &args.data.data {
        manifest.input("data", data.display());
    }
    manifest.seeds = seeds;
    manifest.output("results.csv");
    if !outcome.failures.is_empty() {
        manifest.output("errors.csv");
    }
    manifest.write(out).map_err(runtime)?;

    println!(
        "wrote {} result rows ({} failures) to {}",
        outcome.rows.len(),
        outcome.failures.len(),
        out.join("results.csv").display()
    );
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial(format!("{} grid cells failed", outcome.failures.len())))
    }
}
