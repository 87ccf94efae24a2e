//! Monte Carlo size/power studies over `(n, c, scheme)` cells.
//!
//! Every replication draws Brownian curves, runs the statistic pipeline and
//! records `W_n`, `D_n`, `T_n`, the truncation level and the estimation
//! error. One limiting-supremum distribution is simulated per cell and shared
//! by all replications in it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnspace::{
    brownian_eigenvalue, coefficient_function, generate_dataset, snr_sigma, CoefficientKind, FunctionalSample, Grid,
    DEFAULT_GRID_SIZE,
};
use crate::fpca::{
    spectral_gaps, truncation_rule, FpcaFit, RegularizationScheme, SchemeKind, SigmaMode, TruncationRule,
};
use crate::fractional::OptimizerConfig;
use crate::gproc::{simulate_null, GpConfig, GpKernel};
use crate::rng::{derive_seed, stream};
use crate::testing::{evaluate, schedule_params, ConstantRule, Evaluation, ScheduleSpec, TestSpec, MIN_SCHEDULE_N};

/// Population eigenvalues scanned by [`deterministic_k`].
const ANALYTIC_SCAN: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    /// `C = lambda_1^c`, `k` from the analytic Brownian spectrum, baselines recorded.
    Deterministic,
    /// `C = lambda_hat_1^c`, per-replication `k_hat`, null simulated at `ceil(mean k_hat)`.
    DataBased,
}

impl TruncationMode {
    pub fn name(self) -> &'static str {
        match self {
            TruncationMode::Deterministic => "deterministic",
            TruncationMode::DataBased => "data_based",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub rho_kind: CoefficientKind,
    /// Signal-to-noise ratio fixing `sigma_eps`; unused for `rho0`.
    pub snr: Option<f64>,
    /// Explicit noise level; takes precedence over `snr`. Defaults to 1 for `rho0`.
    pub sigma_eps: Option<f64>,
    /// Use the true `sigma_eps` in the statistics instead of estimating it.
    pub sigma_known: bool,
    pub n_list: Vec<usize>,
    pub n_sims: usize,
    pub c_exponents: Vec<f64>,
    pub truncation_mode: TruncationMode,
    pub schemes: Vec<SchemeKind>,
    pub alpha: f64,
    pub grid_size: usize,
    pub gp: GpConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// CSV destination; a `.manifest.json` is written next to it.
    pub output: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            rho_kind: CoefficientKind::Rho0,
            snr: None,
            sigma_eps: None,
            sigma_known: true,
            n_list: vec![50, 200, 1000],
            n_sims: 200,
            c_exponents: vec![2.0, 3.0, 4.0, 5.0, 7.0, 8.0],
            truncation_mode: TruncationMode::Deterministic,
            schemes: vec![SchemeKind::Ridge],
            alpha: 0.05,
            grid_size: DEFAULT_GRID_SIZE,
            gp: GpConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            output: None,
        }
    }
}

impl StudyConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_sims == 0 {
            return bad("n_sims must be at least 1".into());
        }
        if self.n_list.is_empty() || self.c_exponents.is_empty() || self.schemes.is_empty() {
            return bad("n_list, c_exponents and schemes must be nonempty".into());
        }
        if let Some(&n) = self.n_list.iter().find(|&&n| n < MIN_SCHEDULE_N) {
            return bad(format!("sample size {n} below {MIN_SCHEDULE_N}"));
        }
        if let Some(c) = self.c_exponents.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return bad(format!("exponent {c} must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2".into());
        }
        if self.gp.reps == 0 || self.gp.n_boundary + self.gp.n_interior == 0 {
            return bad("gp needs at least one replication and one index point".into());
        }
        self.noise_level(&coefficient_function(
            self.rho_kind,
            &Arc::new(Grid::equispaced(self.grid_size)?),
        ))?;
        Ok(())
    }

    fn noise_level(&self, rho: &FunctionalSample) -> Result<f64> {
        match (self.sigma_eps, self.snr) {
            (Some(s), _) if s > 0.0 && s.is_finite() => Ok(s),
            (Some(s), _) => Err(Error::Config(format!("sigma_eps must be positive, got {s}"))),
            (None, _) if rho.is_zero() => Ok(1.0),
            (None, Some(snr)) => snr_sigma(rho, snr).map_err(|e| Error::Config(e.to_string())),
            (None, None) => Err(Error::Config("a nonzero coefficient needs snr or sigma_eps".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub n: usize,
    pub c: f64,
    pub scheme: SchemeKind,
    pub truncation_mode: TruncationMode,
    pub mean_k_hat: f64,
    /// Dimension of the simulated null process.
    pub gp_k: usize,
    pub critical_value: f64,
    #[serde(rename = "reject_rate_W")]
    pub reject_rate_w: f64,
    #[serde(rename = "reject_rate_D")]
    pub reject_rate_d: Option<f64>,
    #[serde(rename = "reject_rate_T")]
    pub reject_rate_t: Option<f64>,
    pub mean_log_error: f64,
    pub successes: usize,
    pub failures: usize,
}

/// `int (rho - rho_hat)^2`, relative to `int rho^2` unless `rho = 0`.
pub fn error_measure(rho_true: &FunctionalSample, fit: &FpcaFit) -> Result<f64> {
    if !crate::fnspace::same_grid(rho_true.grid(), fit.eig.grid()) {
        return Err(Error::GridMismatch);
    }
    let rho_hat = fit.rho_hat();
    let w = rho_true.grid().weights();
    let diff: Vec<f64> = rho_true
        .values()
        .iter()
        .zip(rho_hat.values())
        .map(|(a, b)| a - b)
        .collect();
    let err = crate::fnspace::weighted_dot(w, &diff, &diff);
    if rho_true.is_zero() {
        Ok(err)
    } else {
        Ok(err / crate::fnspace::weighted_dot(w, rho_true.values(), rho_true.values()))
    }
}

fn analytic_spectrum() -> Vec<f64> {
    (1..=ANALYTIC_SCAN).map(brownian_eigenvalue).collect()
}

/// Truncation level from the Brownian spectrum with `c_n = lambda_1^c / log log n`.
pub fn deterministic_k(n: usize, c: f64) -> Result<usize> {
    let lambda = analytic_spectrum();
    let sched = schedule_params(n, lambda[0].powf(c), lambda[0])?;
    truncation_rule(&lambda, &spectral_gaps(&lambda), sched.c_n).ok_or(Error::TruncationEmpty { c_n: sched.c_n })
}

struct Replication {
    eval: Evaluation,
    log_error: f64,
}

struct Cell {
    n: usize,
    c: f64,
    scheme: SchemeKind,
}

fn null_kernel(cfg: &StudyConfig, cell: &Cell, reps: &[Replication]) -> Result<GpKernel> {
    let population = analytic_spectrum();
    let (lambda, lambda1) = match cfg.truncation_mode {
        TruncationMode::Deterministic => {
            let k = deterministic_k(cell.n, cell.c)?;
            (population[..k].to_vec(), population[0])
        }
        TruncationMode::DataBased => {
            if reps.is_empty() {
                return Err(Error::EmptySamples);
            }
            let m = reps.len() as f64;
            let mean_k = reps.iter().map(|r| r.eval.fit.k_hat as f64).sum::<f64>() / m;
            let k = mean_k.ceil() as usize;
            let avail = reps.iter().map(|r| r.eval.fit.eig.len()).min().unwrap_or(0);
            let k = k.min(avail);
            let lambda: Vec<f64> = (0..k)
                .map(|j| reps.iter().map(|r| r.eval.fit.eig.eigenvalues()[j]).sum::<f64>() / m)
                .collect();
            let first = lambda[0];
            (lambda, first)
        }
    };
    let sched = schedule_params(cell.n, lambda1.powf(cell.c), lambda1)?;
    let scheme = RegularizationScheme::new(cell.scheme, sched.c_n, sched.alpha_n)?;
    let (lam, f): (Vec<f64>, Vec<f64>) = lambda
        .iter()
        .map(|&l| (l, scheme.f_n(l)))
        .filter(|&(_, f)| f > 0.0)
        .unzip();
    if lam.is_empty() {
        return Err(Error::NoActiveWeights { c_n: sched.c_n });
    }
    GpKernel::new(lam, f, sched.a_n)
}

fn run_cell(cfg: &StudyConfig, index: u64, cell: &Cell, rho: &FunctionalSample) -> Result<CellReport> {
    let sigma = cfg.noise_level(rho)?;
    let (schedule, truncation, baselines) = match cfg.truncation_mode {
        TruncationMode::Deterministic => (
            ConstantRule::PopulationPower(cell.c),
            TruncationRule::Fixed(deterministic_k(cell.n, cell.c)?),
            true,
        ),
        TruncationMode::DataBased => (ConstantRule::EmpiricalPower(cell.c), TruncationRule::Empirical, false),
    };
    let spec = |rep: u64| TestSpec {
        alpha: cfg.alpha,
        rho0: None,
        scheme: cell.scheme,
        schedule: ScheduleSpec {
            constant: schedule,
            ..ScheduleSpec::default()
        },
        sigma: if cfg.sigma_known {
            SigmaMode::Known(sigma)
        } else {
            SigmaMode::Estimate
        },
        truncation,
        gp: cfg.gp,
        optimizer: cfg.optimizer,
        seed: derive_seed(cfg.seed, &[index, 1, rep]),
        baselines,
    };

    // datasets depend on (n, rep) only, so cells at the same n are paired
    let outcomes: Vec<Result<Replication>> = (0..cfg.n_sims as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(cfg.seed, &[0, cell.n as u64, rep]);
            let data = generate_dataset(cell.n, rho, sigma, &mut rng)?;
            let eval = evaluate(&data, &spec(rep))?;
            let log_error = error_measure(rho, &eval.fit)?.ln();
            Ok(Replication { eval, log_error })
        })
        .collect();
    let mut reps = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Ok(r) => reps.push(r),
            Err(e) => log::debug!("replication failed in cell n={} c={}: {e}", cell.n, cell.c),
        }
    }
    let failures = cfg.n_sims - reps.len();

    let kernel = null_kernel(cfg, cell, &reps);
    let null =
        kernel.and_then(|k| simulate_null(&k, &cfg.gp, derive_seed(cfg.seed, &[index, 2])).map(|s| (k.dim(), s)));
    let (gp_k, null) = match null {
        Ok(v) => v,
        Err(e) => {
            log::warn!("null simulation failed in cell n={} c={}: {e}", cell.n, cell.c);
            return Ok(failed_cell(cfg, cell, &reps, cfg.n_sims));
        }
    };
    let beta_n = schedule_params(cell.n, 1.0, 1.0)?.beta_n;
    let q = null.quantile(beta_n, cfg.alpha)?;

    let m = reps.len();
    let rate = |count: usize| if m == 0 { f64::NAN } else { count as f64 / m as f64 };
    let reject_w = reps.iter().filter(|r| r.eval.w_n > q).count();
    let (rate_d, rate_t) = if baselines {
        let d = reps.iter().filter(|r| r.eval.reject_d == Some(true)).count();
        let t = reps.iter().filter(|r| r.eval.reject_t == Some(true)).count();
        (Some(rate(d)), Some(rate(t)))
    } else {
        (None, None)
    };
    Ok(CellReport {
        n: cell.n,
        c: cell.c,
        scheme: cell.scheme,
        truncation_mode: cfg.truncation_mode,
        mean_k_hat: mean(reps.iter().map(|r| r.eval.fit.k_hat as f64)),
        gp_k,
        critical_value: q,
        reject_rate_w: rate(reject_w),
        reject_rate_d: rate_d,
        reject_rate_t: rate_t,
        mean_log_error: mean(reps.iter().map(|r| r.log_error)),
        successes: m,
        failures,
    })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

fn failed_cell(cfg: &StudyConfig, cell: &Cell, reps: &[Replication], failures: usize) -> CellReport {
    CellReport {
        n: cell.n,
        c: cell.c,
        scheme: cell.scheme,
        truncation_mode: cfg.truncation_mode,
        mean_k_hat: mean(reps.iter().map(|r| r.eval.fit.k_hat as f64)),
        gp_k: 0,
        critical_value: f64::NAN,
        reject_rate_w: f64::NAN,
        reject_rate_d: None,
        reject_rate_t: None,
        mean_log_error: mean(reps.iter().map(|r| r.log_error)),
        successes: 0,
        failures,
    }
}

/// Runs every `(n, c, scheme)` cell in config order.
pub fn run_study(cfg: &StudyConfig) -> Result<Vec<CellReport>> {
    cfg.validate()?;
    let grid = Arc::new(Grid::equispaced(cfg.grid_size)?);
    let rho = coefficient_function(cfg.rho_kind, &grid);
    let mut out = Vec::new();
    let mut index = 0u64;
    for &n in &cfg.n_list {
        for &c in &cfg.c_exponents {
            for &scheme in &cfg.schemes {
                let cell = Cell { n, c, scheme };
                let report = run_cell(cfg, index, &cell, &rho)?;
                log::info!(
                    "cell n={n} c={c} {}: W {:.3} failures {}",
                    scheme.name(),
                    report.reject_rate_w,
                    report.failures
                );
                out.push(report);
                index += 1;
            }
        }
    }
    Ok(out)
}

pub fn write_csv<W: std::io::Write>(reports: &[CellReport], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in reports {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: StudyConfig,
    pub cells: usize,
}

/// Path of the manifest written alongside `csv_path`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the CSV table and its manifest.
pub fn write_outputs(cfg: &StudyConfig, reports: &[CellReport], csv_path: &Path) -> Result<()> {
    write_csv(reports, std::fs::File::create(csv_path)?)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        cells: reports.len(),
    };
    std::fs::write(manifest_path(csv_path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
