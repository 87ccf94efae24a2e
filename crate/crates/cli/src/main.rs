#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod io;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use smallunif::fnspace::{coefficient_function, generate_dataset, snr_sigma};
use smallunif::fpca::{eigensolve, empirical_covariance, fit_with_eigensystem, DEFAULT_RELATIVE_FLOOR};
use smallunif::gproc::{simulate_null, Factorization};
use smallunif::harness::{error_measure, run_study, write_outputs};
use smallunif::rng::stream;
use smallunif::testing::{run_test, schedule_params};
use smallunif::{
    CoefficientKind, ConstantRule, Error, FitOptions, GpConfig, GpKernel, OptimizerConfig, RegularizationScheme,
    Schedule, ScheduleSpec, SchemeKind, SearchPath, SigmaMode, Stage, StudyConfig, TestResult, TestSpec,
    TruncationRule,
};

#[derive(Parser)]
#[command(
    name = "smallunif",
    version,
    about = "Small-uniform tests for scalar-on-function regression"
)]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a Brownian dataset as CSV.
    Generate(GenerateArgs),
    /// Fit the regularized FPCA slope estimator.
    Estimate(EstimateArgs),
    /// Test H0: rho = rho0 with the small-uniform statistic.
    Test(TestArgs),
    /// Simulate the limiting supremum for given kernel parameters.
    SimulateNull(SimulateNullArgs),
    /// Run a Monte Carlo study from a TOML config.
    Study(StudyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "rho1")]
    rho: CoefficientKind,
    /// Signal-to-noise ratio; ignored when --sigma is given.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 100)]
    grid_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (default: stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "ridge")]
    scheme: SchemeKind,
    /// Exponent c in C = lambda_hat_1^c.
    #[arg(long, default_value_t = 2.0)]
    c_exponent: f64,
    /// Fixed C; overrides --c-exponent.
    #[arg(long)]
    c_const: Option<f64>,
    /// Override for a_n.
    #[arg(long)]
    an: Option<f64>,
    /// Override for the ridge parameter alpha_n.
    #[arg(long)]
    alpha_n: Option<f64>,
    /// Override for beta_n.
    #[arg(long)]
    beta: Option<f64>,
}

impl ScheduleArgs {
    fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            constant: match self.c_const {
                Some(c) => ConstantRule::Fixed(c),
                None => ConstantRule::EmpiricalPower(self.c_exponent),
            },
            a_n: self.an,
            alpha_n: self.alpha_n,
            beta_n: self.beta,
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    input: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Known noise level (default: estimated).
    #[arg(long)]
    sigma: Option<f64>,
    /// Fixed truncation level (default: spectral-gap rule).
    #[arg(long)]
    k: Option<usize>,
    /// Compare against a known coefficient function.
    #[arg(long)]
    truth: Option<CoefficientKind>,
    /// Write the serialized fit here.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GpArgs {
    #[arg(long, default_value_t = 20_000)]
    gp_reps: usize,
    #[arg(long, default_value_t = 312)]
    gp_boundary: usize,
    #[arg(long, default_value_t = 313)]
    gp_interior: usize,
}

impl GpArgs {
    fn config(&self) -> GpConfig {
        GpConfig {
            n_boundary: self.gp_boundary,
            n_interior: self.gp_interior,
            reps: self.gp_reps,
        }
    }
}

#[derive(Args)]
struct TestArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Null coefficient function.
    #[arg(long, default_value = "rho0")]
    rho0: CoefficientKind,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Known noise level (default: estimated).
    #[arg(long)]
    sigma: Option<f64>,
    /// Fixed truncation level (default: spectral-gap rule).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also compute D_n and T_n.
    #[arg(long)]
    baselines: bool,
    #[command(flatten)]
    gp: GpArgs,
    /// Random starts for the maximiser.
    #[arg(long, default_value_t = 16)]
    starts: usize,
    /// Search in spherical coordinates.
    #[arg(long)]
    spherical: bool,
    /// Also write the result record here.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateNullArgs {
    /// Process dimension; with --lambdas keeps the first k values.
    #[arg(long)]
    k: Option<usize>,
    /// Eigenvalues (default: Brownian).
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Explicit f_n values, one per eigenvalue (default: from --scheme).
    #[arg(long, value_delimiter = ',')]
    fvals: Option<Vec<f64>>,
    /// Sample size driving the default schedule.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 20_000)]
    reps: usize,
    #[arg(long, default_value_t = 312)]
    boundary: usize,
    #[arg(long, default_value_t = 313)]
    interior: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the sorted samples here.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    config: PathBuf,
    /// CSV destination; overrides the config.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            e => Failure::Pipeline(e),
        }
    }
}

impl From<io::ParseError> for Failure {
    fn from(e: io::ParseError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Pipeline(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn emit<T: Serialize>(value: &T, output: Option<&PathBuf>) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    if let Some(path) = output {
        std::fs::write(path, format!("{text}\n"))?;
    }
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_generate(a: &GenerateArgs) -> CmdResult {
    let grid = Arc::new(smallunif::Grid::equispaced(a.grid_size)?);
    let rho = coefficient_function(a.rho, &grid);
    let sigma = match (a.sigma, a.snr) {
        (Some(s), _) => s,
        (None, Some(snr)) => snr_sigma(&rho, snr)?,
        (None, None) => 1.0,
    };
    let data = generate_dataset(a.n, &rho, sigma, &mut stream(a.seed, &[]))?;
    match &a.output {
        Some(path) => io::write_dataset(&data, std::fs::File::create(path)?)?,
        None => io::write_dataset(&data, std::io::stdout().lock())?,
    }
    log::info!("generated n={} rho={} sigma={sigma}", a.n, a.rho.name());
    Ok(())
}

fn sigma_mode(sigma: Option<f64>) -> SigmaMode {
    sigma.map_or(SigmaMode::Estimate, SigmaMode::Known)
}

fn truncation_rule(k: Option<usize>) -> TruncationRule {
    k.map_or(TruncationRule::Empirical, TruncationRule::Fixed)
}

#[derive(Serialize)]
struct EstimateSummary {
    n: usize,
    k_hat: usize,
    eigenvalues: Vec<f64>,
    sigma_eps: f64,
    sigma_estimated: bool,
    scheme: RegularizationScheme,
    schedule: Schedule,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<f64>,
}

fn cmd_estimate(a: &EstimateArgs) -> CmdResult {
    let data = io::load_dataset(&a.input)?;
    let eig = eigensolve(&empirical_covariance(&data), data.grid(), DEFAULT_RELATIVE_FLOOR)
        .map_err(|e| e.at(Stage::Eigensolve))?;
    // a fixed truncation makes the threshold cosmetic, so tiny samples are allowed
    let schedule = a
        .schedule
        .spec()
        .resolve_with(data.n(), eig.eigenvalues()[0], a.k.is_none())
        .map_err(|e| e.at(Stage::Schedule))?;
    let scheme = RegularizationScheme::new(a.schedule.scheme, schedule.c_n, schedule.alpha_n)?;
    let opts = FitOptions {
        scheme,
        a_n: schedule.a_n,
        sigma: sigma_mode(a.sigma),
        truncation: truncation_rule(a.k),
    };
    let fit = fit_with_eigensystem(&data, eig, &opts).map_err(|e| e.at(Stage::Fit))?;
    if let Some(path) = &a.output {
        fit.save(path)?;
    }
    let error = match a.truth {
        Some(kind) => Some(error_measure(&coefficient_function(kind, data.grid()), &fit)?),
        None => None,
    };
    emit(
        &EstimateSummary {
            n: fit.n,
            k_hat: fit.k_hat,
            eigenvalues: fit.eigenvalues().to_vec(),
            sigma_eps: fit.sigma_eps,
            sigma_estimated: fit.sigma_estimated,
            scheme: fit.scheme,
            schedule,
            error,
        },
        None,
    )
}

#[derive(Serialize)]
struct TestOutput {
    decision: &'static str,
    #[serde(flatten)]
    result: TestResult,
}

fn cmd_test(a: &TestArgs) -> CmdResult {
    let data = io::load_dataset(&a.input)?;
    let spec = TestSpec {
        alpha: a.alpha,
        rho0: Some(coefficient_function(a.rho0, data.grid())),
        scheme: a.schedule.scheme,
        schedule: a.schedule.spec(),
        sigma: sigma_mode(a.sigma),
        truncation: truncation_rule(a.k),
        gp: a.gp.config(),
        optimizer: OptimizerConfig {
            starts: a.starts,
            path: if a.spherical {
                SearchPath::Spherical
            } else {
                SearchPath::Cartesian
            },
            ..OptimizerConfig::default()
        },
        seed: a.seed,
        baselines: a.baselines,
    };
    let result = run_test(&data, &spec)?;
    let decision = if result.reject { "reject" } else { "accept" };
    emit(&TestOutput { decision, result }, a.output.as_ref())
}

#[derive(Serialize)]
struct NullSummary {
    k: usize,
    lambdas: Vec<f64>,
    fvals: Vec<f64>,
    a_n: f64,
    beta_n: f64,
    reps: usize,
    points: usize,
    seed: u64,
    factorization: Factorization,
    q90: f64,
    q95: f64,
    q99: f64,
}

fn cmd_simulate_null(a: &SimulateNullArgs) -> CmdResult {
    let mut lambdas = match &a.lambdas {
        Some(l) => l.clone(),
        None => (1..=a.k.unwrap_or(1))
            .map(smallunif::fnspace::brownian_eigenvalue)
            .collect(),
    };
    if let Some(k) = a.k {
        if k == 0 || k > lambdas.len() {
            return Err(Failure::Usage(format!("--k {k} outside 1..={}", lambdas.len())));
        }
        lambdas.truncate(k);
    }
    let c_const = match a.schedule.c_const {
        Some(c) => c,
        None => lambdas[0].powf(a.schedule.c_exponent),
    };
    let mut schedule = schedule_params(a.n, c_const, lambdas[0])?;
    schedule.a_n = a.schedule.an.unwrap_or(schedule.a_n);
    schedule.alpha_n = a.schedule.alpha_n.unwrap_or(schedule.alpha_n);
    schedule.beta_n = a.schedule.beta.unwrap_or(schedule.beta_n);
    let fvals = match &a.fvals {
        Some(f) if f.len() < lambdas.len() => {
            return Err(Failure::Usage(format!(
                "need {} --fvals, got {}",
                lambdas.len(),
                f.len()
            )))
        }
        Some(f) => f[..lambdas.len()].to_vec(),
        None => {
            let scheme = RegularizationScheme::new(a.schedule.scheme, schedule.c_n, schedule.alpha_n)?;
            lambdas.iter().map(|&l| scheme.f_n(l)).collect()
        }
    };
    let requested = lambdas.len();
    let (lambdas, fvals): (Vec<f64>, Vec<f64>) = lambdas.into_iter().zip(fvals).filter(|&(_, f)| f > 0.0).unzip();
    if lambdas.len() < requested {
        log::warn!(
            "{} of {requested} components have f_n = 0 (c_n = {:.4}) and are dropped",
            requested - lambdas.len(),
            schedule.c_n
        );
    }
    if lambdas.is_empty() {
        return Err(Failure::Pipeline(
            Error::NoActiveWeights { c_n: schedule.c_n }.at(Stage::NullSimulation),
        ));
    }
    let kernel = GpKernel::new(lambdas.clone(), fvals.clone(), schedule.a_n)?;
    let cfg = GpConfig {
        n_boundary: a.boundary,
        n_interior: a.interior,
        reps: a.reps,
    };
    let sim = simulate_null(&kernel, &cfg, a.seed).map_err(|e| e.at(Stage::NullSimulation))?;
    if let Some(path) = &a.output {
        sim.save(path)?;
    }
    let q = |alpha: f64| sim.quantile(schedule.beta_n, alpha).map_err(|e| e.at(Stage::Quantile));
    emit(
        &NullSummary {
            k: kernel.dim(),
            lambdas,
            fvals,
            a_n: schedule.a_n,
            beta_n: schedule.beta_n,
            reps: sim.reps,
            points: sim.points,
            seed: sim.seed,
            factorization: sim.factorization,
            q90: q(0.10)?,
            q95: q(0.05)?,
            q99: q(0.01)?,
        },
        None,
    )
}

fn cmd_study(a: &StudyArgs) -> CmdResult {
    let text =
        std::fs::read_to_string(&a.config).map_err(|e| Failure::Usage(format!("{}: {e}", a.config.display())))?;
    let mut cfg = StudyConfig::from_toml(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    if a.output.is_some() {
        cfg.output = a.output.clone();
    }
    let reports = run_study(&cfg)?;
    if let Some(path) = &cfg.output {
        write_outputs(&cfg, &reports, path)?;
        log::info!("wrote {}", path.display());
    }
    emit(&reports, None)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Test(a) => cmd_test(a),
        Command::SimulateNull(a) => cmd_simulate_null(a),
        Command::Study(a) => cmd_study(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            // staged errors render as "<stage>: <cause>"
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
