//! The hypothesis test `H0: rho = rho0` built on the small-uniform statistic,
//! plus the `D_n` / `T_n` baselines.
//!
//! [`run_test`] chains: eigensolve, parameter schedule, truncation, null
//! reduction `Y' = Y - <X, Pi_k rho0>`, FPCA fit, `W_n`, simulation of the
//! limiting supremum with empirical plug-ins, quantile, decision. Each failure
//! is tagged with the [`Stage`] it came from.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result, Stage, StageExt};
use crate::fnspace::{brownian_eigenvalue, Dataset, FunctionalSample};
use crate::fpca::{
    cross_covariance, eigensolve, empirical_covariance, fit_with_eigensystem, truncation, Eigensystem, FitOptions,
    FpcaFit, RegularizationScheme, SchemeKind, SigmaMode, TruncationRule, DEFAULT_RELATIVE_FLOOR,
};
use crate::fractional::{small_uniform_statistic, OptimizerConfig, OptimizerReport};
use crate::gproc::{simulate_null, Factorization, GpConfig, GpKernel, SupSimResult};
use crate::rng::{derive_seed, stream};

/// Smallest sample size for which `log log n` is comfortably positive.
pub const MIN_SCHEDULE_N: usize = 16;

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

pub fn chi_square_quantile(p: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(p)
}

/// How the constant `C` in `c_n = C / log log n` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantRule {
    Fixed(f64),
    /// `C = lambda_hat_1^c`
    EmpiricalPower(f64),
    /// `C = lambda_1^c` with the Brownian `lambda_1 = 4 / pi^2`
    PopulationPower(f64),
}

/// Parameter schedule; `None` overrides select the default rates
/// `a_n = 1/n^2`, `alpha_n = 1/(sqrt(n) log n)`, `beta_n = (log n)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub constant: ConstantRule,
    #[serde(default)]
    pub a_n: Option<f64>,
    #[serde(default)]
    pub alpha_n: Option<f64>,
    #[serde(default)]
    pub beta_n: Option<f64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            constant: ConstantRule::EmpiricalPower(2.0),
            a_n: None,
            alpha_n: None,
            beta_n: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub n: usize,
    pub c_const: f64,
    pub c_n: f64,
    pub a_n: f64,
    pub alpha_n: f64,
    pub beta_n: f64,
}

/// Default schedule for sample size `n` and constant `C`.
pub fn schedule_params(n: usize, c_const: f64, lambda1_hat: f64) -> Result<Schedule> {
    if n < MIN_SCHEDULE_N {
        return Err(Error::ScheduleUndefined(n));
    }
    raw_schedule(n, c_const, lambda1_hat)
}

/// The same formulas for any `n >= 3` (where `log log n > 0`), for callers
/// that only need an estimate and accept a poorly separated threshold.
pub fn schedule_params_unguarded(n: usize, c_const: f64, lambda1_hat: f64) -> Result<Schedule> {
    if n < 3 {
        return Err(Error::ScheduleUndefined(n));
    }
    if n < MIN_SCHEDULE_N {
        log::warn!(
            "n = {n} is below {MIN_SCHEDULE_N}; log log n = {:.3} makes c_n unstable",
            (n as f64).ln().ln()
        );
    }
    raw_schedule(n, c_const, lambda1_hat)
}

fn raw_schedule(n: usize, c_const: f64, lambda1_hat: f64) -> Result<Schedule> {
    if !(c_const > 0.0) || !c_const.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "schedule constant must be positive, got {c_const}"
        )));
    }
    let nf = n as f64;
    let ln = nf.ln();
    let c_n = c_const / ln.ln();
    if c_n >= lambda1_hat {
        log::warn!("c_n = {c_n:e} is not below lambda_1 = {lambda1_hat:e}; truncation may be empty");
    }
    Ok(Schedule {
        n,
        c_const,
        c_n,
        a_n: 1.0 / (nf * nf),
        alpha_n: 1.0 / (nf.sqrt() * ln),
        beta_n: ln * ln,
    })
}

impl ScheduleSpec {
    pub fn resolve(&self, n: usize, lambda1_hat: f64) -> Result<Schedule> {
        self.resolve_with(n, lambda1_hat, true)
    }

    /// `guarded = false` relaxes `n >= 16` to `n >= 3`.
    pub fn resolve_with(&self, n: usize, lambda1_hat: f64, guarded: bool) -> Result<Schedule> {
        let c_const = match self.constant {
            ConstantRule::Fixed(c) => c,
            ConstantRule::EmpiricalPower(e) => lambda1_hat.powf(e),
            ConstantRule::PopulationPower(e) => brownian_eigenvalue(1).powf(e),
        };
        let mut s = if guarded {
            schedule_params(n, c_const, lambda1_hat)?
        } else {
            schedule_params_unguarded(n, c_const, lambda1_hat)?
        };
        // fixed overrides do not vanish with n, so the rate requirements of
        // the default schedule no longer hold
        if let Some(a) = self.a_n {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument(format!("a_n must be positive, got {a}")));
            }
            log::warn!("a_n fixed at {a:e}: roughening no longer vanishes with n");
            s.a_n = a;
        }
        if let Some(a) = self.alpha_n {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument(format!("alpha_n must be positive, got {a}")));
            }
            if a * (n as f64).sqrt() / s.c_n >= 1.0 {
                log::warn!("alpha_n = {a:e} violates alpha_n sqrt(n) / c_n -> 0 at n = {n}");
            }
            s.alpha_n = a;
        }
        if let Some(b) = self.beta_n {
            if !(b > 0.0) {
                return Err(Error::InvalidArgument(format!("beta_n must be positive, got {b}")));
            }
            log::warn!("beta_n fixed at {b}: normalisation no longer diverges with n");
            s.beta_n = b;
        }
        Ok(s)
    }
}

/// Everything needed to run one test.
#[derive(Debug, Clone)]
pub struct TestSpec {
    pub alpha: f64,
    /// Null coefficient; `None` tests `rho = 0`.
    pub rho0: Option<FunctionalSample>,
    pub scheme: SchemeKind,
    pub schedule: ScheduleSpec,
    pub sigma: SigmaMode,
    pub truncation: TruncationRule,
    pub gp: GpConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub baselines: bool,
}

impl Default for TestSpec {
    fn default() -> Self {
        TestSpec {
            alpha: 0.05,
            rho0: None,
            scheme: SchemeKind::Ridge,
            schedule: ScheduleSpec::default(),
            sigma: SigmaMode::Estimate,
            truncation: TruncationRule::Empirical,
            gp: GpConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            baselines: false,
        }
    }
}

impl TestSpec {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub reps: usize,
    pub points: usize,
    pub seed: u64,
    pub factorization: Factorization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    #[serde(rename = "W_n")]
    pub w_n: f64,
    pub q: f64,
    pub reject: bool,
    pub alpha: f64,
    pub n: usize,
    pub k_hat: usize,
    /// Coordinates with a nonzero spectral weight.
    pub active_k: usize,
    pub sigma_eps: f64,
    pub sigma_estimated: bool,
    pub scheme: RegularizationScheme,
    pub schedule: Schedule,
    #[serde(rename = "D_n")]
    pub d_n: Option<f64>,
    #[serde(rename = "T_n")]
    pub t_n: Option<f64>,
    #[serde(rename = "reject_D")]
    pub reject_d: Option<bool>,
    #[serde(rename = "reject_T")]
    pub reject_t: Option<bool>,
    pub optimizer: OptimizerReport,
    pub null_simulation: NullSummary,
    pub seed: u64,
}

/// `Y'_i = Y_i - sum_{j <= k} <rho0, e_j> <X_i, e_j>`; the identity when `rho0 = 0`.
pub fn reduce_null(data: &Dataset, rho0: &FunctionalSample, eig: &Eigensystem, k: usize) -> Result<Dataset> {
    if !crate::fnspace::same_grid(data.grid(), rho0.grid()) {
        return Err(Error::GridMismatch);
    }
    if rho0.is_zero() {
        return Ok(data.clone());
    }
    let coords = eig.coordinates(rho0, k)?;
    let scores = crate::fpca::scores(data, eig, k)?;
    let y: Vec<f64> = data
        .y()
        .iter()
        .enumerate()
        .map(|(i, y)| y - (0..k).map(|j| coords[j] * scores[(i, j)]).sum::<f64>())
        .collect();
    data.with_y(y)
}

/// `D_n = (n / sigma^2) sum_{j <= k} Delta_j^2 / lambda_j`, asymptotically `chi^2(k)` under the null.
pub fn dn_statistic(data: &Dataset, eig: &Eigensystem, k: usize, sigma: f64) -> Result<f64> {
    if k == 0 || k > eig.len() {
        return Err(Error::InvalidArgument(format!(
            "truncation {k} outside 1..={}",
            eig.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::ZeroSigma);
    }
    let delta = cross_covariance(data, eig, k)?;
    let s: f64 = delta.iter().zip(eig.eigenvalues()).map(|(d, l)| d * d / l).sum();
    Ok(data.n() as f64 * s / (sigma * sigma))
}

/// `T_n = (D_n - k) / sqrt(k)`.
pub fn tn_statistic(d_n: f64, k: usize) -> f64 {
    (d_n - k as f64) / (k as f64).sqrt()
}

/// `(D_n > q_{chi2(k), 1-alpha}, |T_n| > sqrt(2) q_{N(0,1), 1-alpha/2})`.
pub fn baseline_decisions(d_n: f64, t_n: f64, k: usize, alpha: f64) -> (bool, bool) {
    let d_crit = chi_square_quantile(1.0 - alpha, k);
    let t_crit = std::f64::consts::SQRT_2 * normal_quantile(1.0 - alpha / 2.0);
    (d_n > d_crit, t_n.abs() > t_crit)
}

/// Statistic-side output of the pipeline, before a critical value is attached.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub fit: FpcaFit,
    pub schedule: Schedule,
    pub w_n: f64,
    pub report: OptimizerReport,
    pub d_n: Option<f64>,
    pub t_n: Option<f64>,
    pub reject_d: Option<bool>,
    pub reject_t: Option<bool>,
}

/// Runs everything up to and including `W_n` (and the baselines if requested).
pub fn evaluate(data: &Dataset, spec: &TestSpec) -> Result<Evaluation> {
    spec.validate()?;
    let eig = eigensolve(&empirical_covariance(data), data.grid(), DEFAULT_RELATIVE_FLOOR).stage(Stage::Eigensolve)?;
    let schedule = spec
        .schedule
        .resolve(data.n(), eig.eigenvalues()[0])
        .stage(Stage::Schedule)?;
    let scheme = RegularizationScheme::new(spec.scheme, schedule.c_n, schedule.alpha_n).stage(Stage::Schedule)?;
    let k = match spec.truncation {
        TruncationRule::Empirical => truncation(&eig, scheme.c_n).stage(Stage::Truncation)?,
        TruncationRule::Fixed(k) => {
            if k == 0 || k > eig.len() {
                return Err(
                    Error::InvalidArgument(format!("fixed truncation {k} outside 1..={}", eig.len()))
                        .at(Stage::Truncation),
                );
            }
            k
        }
    };
    let reduced = match &spec.rho0 {
        Some(rho0) => reduce_null(data, rho0, &eig, k).stage(Stage::ReduceNull)?,
        None => data.clone(),
    };
    let opts = FitOptions {
        scheme,
        a_n: schedule.a_n,
        sigma: spec.sigma,
        truncation: TruncationRule::Fixed(k),
    };
    let fit = fit_with_eigensystem(&reduced, eig, &opts).stage(Stage::Fit)?;
    let (d_n, t_n, reject_d, reject_t) = if spec.baselines {
        let d = dn_statistic(&reduced, &fit.eig, k, fit.sigma_eps).stage(Stage::Baselines)?;
        let t = tn_statistic(d, k);
        let (rd, rt) = baseline_decisions(d, t, k, spec.alpha);
        (Some(d), Some(t), Some(rd), Some(rt))
    } else {
        (None, None, None, None)
    };
    let (w_n, report) = small_uniform_statistic(&fit, schedule.beta_n, &spec.optimizer, &mut stream(spec.seed, &[1]))
        .stage(Stage::Statistic)?;
    Ok(Evaluation {
        fit,
        schedule,
        w_n,
        report,
        d_n,
        t_n,
        reject_d,
        reject_t,
    })
}

fn assemble(eval: Evaluation, spec: &TestSpec, null: &SupSimResult) -> Result<TestResult> {
    let q = null.quantile(eval.schedule.beta_n, spec.alpha).stage(Stage::Quantile)?;
    let active_k = eval.fit.weights().iter().filter(|&&w| w > 0.0).count();
    Ok(TestResult {
        w_n: eval.w_n,
        q,
        reject: eval.w_n > q,
        alpha: spec.alpha,
        n: eval.fit.n,
        k_hat: eval.fit.k_hat,
        active_k,
        sigma_eps: eval.fit.sigma_eps,
        sigma_estimated: eval.fit.sigma_estimated,
        scheme: eval.fit.scheme,
        schedule: eval.schedule,
        d_n: eval.d_n,
        t_n: eval.t_n,
        reject_d: eval.reject_d,
        reject_t: eval.reject_t,
        optimizer: eval.report,
        null_simulation: NullSummary {
            reps: null.reps,
            points: null.points,
            seed: null.seed,
            factorization: null.factorization,
        },
        seed: spec.seed,
    })
}

/// Full test with a freshly simulated null distribution.
pub fn run_test(data: &Dataset, spec: &TestSpec) -> Result<TestResult> {
    let eval = evaluate(data, spec)?;
    let kernel = GpKernel::from_fit(&eval.fit).stage(Stage::NullSimulation)?;
    let null = simulate_null(&kernel, &spec.gp, derive_seed(spec.seed, &[2])).stage(Stage::NullSimulation)?;
    assemble(eval, spec, &null)
}

/// Full test against a previously simulated null distribution.
pub fn run_test_with_null(data: &Dataset, spec: &TestSpec, null: &SupSimResult) -> Result<TestResult> {
    let eval = evaluate(data, spec)?;
    assemble(eval, spec, null)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fnspace::{coefficient_function, generate_dataset, CoefficientKind, Grid};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn grid100() -> Arc<Grid> {
        Arc::new(Grid::equispaced(100).unwrap())
    }

    #[test]
    fn schedule_examples() {
        let s = schedule_params(1000, 1.0, 0.4).unwrap();
        assert_abs_diff_eq!(s.c_n, 1.0 / (1000f64).ln().ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.c_n, 0.5174, epsilon = 1e-4);
        assert_abs_diff_eq!(s.a_n, 1e-6, epsilon = 1e-20);
        assert_abs_diff_eq!(s.beta_n, 47.717, epsilon = 1e-3);
        assert_abs_diff_eq!(s.alpha_n, 1.0 / (1000f64.sqrt() * 1000f64.ln()), epsilon = 1e-15);
        assert!(matches!(
            schedule_params(15, 1.0, 0.4),
            Err(Error::ScheduleUndefined(15))
        ));
        assert!(schedule_params(16, 1.0, 0.4).is_ok());
        assert!(schedule_params_unguarded(3, 1.0, 0.4).is_ok());
        assert!(matches!(
            schedule_params_unguarded(2, 1.0, 0.4),
            Err(Error::ScheduleUndefined(2))
        ));
    }

    #[test]
    fn schedule_rules() {
        let spec = ScheduleSpec {
            constant: ConstantRule::PopulationPower(2.0),
            ..ScheduleSpec::default()
        };
        let s = spec.resolve(1000, 0.3).unwrap();
        assert_abs_diff_eq!(s.c_const, brownian_eigenvalue(1).powi(2), epsilon = 1e-15);
        let spec = ScheduleSpec {
            constant: ConstantRule::EmpiricalPower(3.0),
            beta_n: Some(2.0),
            ..ScheduleSpec::default()
        };
        let s = spec.resolve(200, 0.5).unwrap();
        assert_abs_diff_eq!(s.c_const, 0.125, epsilon = 1e-15);
        assert_eq!(s.beta_n, 2.0);
    }

    #[test]
    fn tn_examples() {
        assert_eq!(tn_statistic(4.0, 4), 0.0);
        assert_eq!(tn_statistic(0.0, 4), -2.0);
        assert_eq!(tn_statistic(10.0, 4), 3.0);
    }

    #[test]
    fn reference_quantiles() {
        assert_abs_diff_eq!(chi_square_quantile(0.95, 3), 7.814727903251178, epsilon = 1e-6);
        assert_abs_diff_eq!(chi_square_quantile(0.95, 1), 3.841458820694124, epsilon = 1e-6);
        assert_abs_diff_eq!(chi_square_quantile(0.99, 10), 23.209251158954356, epsilon = 1e-6);
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-6);
        assert_abs_diff_eq!(normal_quantile(0.995), 2.5758293035489004, epsilon = 1e-6);
        let t_crit = std::f64::consts::SQRT_2 * normal_quantile(0.975);
        assert_abs_diff_eq!(t_crit, 2.7718, epsilon = 1e-4);
    }

    #[test]
    fn baseline_decision_rules() {
        assert!(!baseline_decisions(0.0, tn_statistic(0.0, 3), 3, 0.999).0);
        assert_eq!(baseline_decisions(0.0, tn_statistic(0.0, 3), 3, 0.05), (false, false));
        assert!(baseline_decisions(7.9, 0.0, 3, 0.05).0);
        assert!(!baseline_decisions(7.7, 0.0, 3, 0.05).0);
        assert!(baseline_decisions(0.0, -2.8, 3, 0.05).1);
    }

    #[test]
    fn reduce_null_identity_for_zero() {
        let g = grid100();
        let rho = coefficient_function(CoefficientKind::Rho2, &g);
        let d = generate_dataset(30, &rho, 0.5, &mut stream(1, &[])).unwrap();
        let eig = eigensolve(&empirical_covariance(&d), d.grid(), DEFAULT_RELATIVE_FLOOR).unwrap();
        let zero = coefficient_function(CoefficientKind::Rho0, &g);
        let r = reduce_null(&d, &zero, &eig, 3).unwrap();
        assert_eq!(r.y(), d.y());
    }

    #[test]
    fn reduce_null_removes_spanned_signal() {
        let g = grid100();
        let rho = coefficient_function(CoefficientKind::Rho1, &g);
        let d = generate_dataset(500, &rho, 0.0, &mut stream(2, &[])).unwrap();
        let eig = eigensolve(&empirical_covariance(&d), d.grid(), DEFAULT_RELATIVE_FLOOR).unwrap();
        let r = reduce_null(&d, &rho, &eig, 6).unwrap();
        let max_y = d.y().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_r = r.y().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_r <= 0.02 * max_y, "{max_r} vs {max_y}");
    }

    #[test]
    fn dn_examples() {
        let g = grid100();
        let zero = coefficient_function(CoefficientKind::Rho0, &g);
        let d = generate_dataset(200, &zero, 0.0, &mut stream(3, &[])).unwrap();
        let eig = eigensolve(&empirical_covariance(&d), d.grid(), DEFAULT_RELATIVE_FLOOR).unwrap();
        assert_eq!(dn_statistic(&d, &eig, 3, 1.0).unwrap(), 0.0);

        let d = generate_dataset(200, &zero, 1.0, &mut stream(4, &[])).unwrap();
        let eig = eigensolve(&empirical_covariance(&d), d.grid(), DEFAULT_RELATIVE_FLOOR).unwrap();
        let base = dn_statistic(&d, &eig, 3, 1.0).unwrap();
        assert!(base >= 0.0);
        let scaled = d.with_y(d.y().iter().map(|y| 3.0 * y).collect()).unwrap();
        let s = dn_statistic(&scaled, &eig, 3, 1.0).unwrap();
        assert!((s - 9.0 * base).abs() < 1e-9 * s.max(1.0));
        assert!(tn_statistic(base, 3) >= -(3f64).sqrt());
    }

    fn small_spec(seed: u64) -> TestSpec {
        TestSpec {
            sigma: SigmaMode::Known(1.0),
            gp: GpConfig {
                n_boundary: 50,
                n_interior: 50,
                reps: 2_000,
            },
            seed,
            baselines: true,
            ..TestSpec::default()
        }
    }

    #[test]
    fn zero_response_accepts() {
        let g = grid100();
        let zero = coefficient_function(CoefficientKind::Rho0, &g);
        let d = generate_dataset(100, &zero, 0.0, &mut stream(5, &[])).unwrap();
        let r = run_test(&d, &small_spec(1)).unwrap();
        assert_eq!(r.w_n, 0.0);
        assert!(!r.reject);
        assert_eq!(r.d_n, Some(0.0));
        assert_eq!(r.reject_d, Some(false));
    }

    #[test]
    fn run_test_is_deterministic_and_order_invariant() {
        let g = grid100();
        let rho = coefficient_function(CoefficientKind::Rho1, &g);
        let d = generate_dataset(120, &rho, 1.0, &mut stream(6, &[])).unwrap();
        let a = run_test(&d, &small_spec(9)).unwrap();
        let b = run_test(&d, &small_spec(9)).unwrap();
        assert_eq!(a, b);

        // reverse observation order
        let n = d.n();
        let x = nalgebra::DMatrix::from_fn(n, 100, |i, k| d.x()[(n - 1 - i, k)]);
        let y: Vec<f64> = d.y().iter().rev().copied().collect();
        let rev = Dataset::new(d.grid().clone(), x, y).unwrap();
        let c = run_test(&rev, &small_spec(9)).unwrap();
        assert_eq!(a.reject, c.reject);
        assert_eq!(a.k_hat, c.k_hat);
        assert!((a.w_n - c.w_n).abs() < 1e-6 * a.w_n.max(1.0));
    }

    #[test]
    fn larger_alpha_rejects_weakly_more() {
        let g = grid100();
        let rho = coefficient_function(CoefficientKind::Rho1, &g);
        let d = generate_dataset(100, &rho, 3.0, &mut stream(7, &[])).unwrap();
        let mut prev_q = f64::INFINITY;
        let mut prev_reject = false;
        for &alpha in &[0.01, 0.05, 0.1, 0.3, 0.6] {
            let mut spec = small_spec(3);
            spec.alpha = alpha;
            let r = run_test(&d, &spec).unwrap();
            assert!(r.q <= prev_q);
            assert!(r.reject || !prev_reject);
            prev_q = r.q;
            prev_reject = r.reject;
        }
    }

    #[test]
    fn null_rejection_rate_near_alpha() {
        let g = grid100();
        let zero = coefficient_function(CoefficientKind::Rho0, &g);
        let reps = 200;
        let rejections: usize = (0..reps)
            .map(|r| {
                let d = generate_dataset(200, &zero, 1.0, &mut stream(100, &[r])).unwrap();
                let mut spec = small_spec(r);
                spec.baselines = false;
                run_test(&d, &spec).unwrap().reject as usize
            })
            .sum();
        let rate = rejections as f64 / reps as f64;
        let bound = 0.05 + 3.0 * (0.05f64 * 0.95 / reps as f64).sqrt() + 0.05;
        assert!(rate <= bound, "rate {rate} above {bound}");
    }

    #[test]
    fn stage_labels() {
        let g = grid100();
        let zero = coefficient_function(CoefficientKind::Rho0, &g);
        let d = generate_dataset(100, &zero, 1.0, &mut stream(8, &[])).unwrap();
        let mut spec = small_spec(1);
        spec.schedule.constant = ConstantRule::Fixed(100.0);
        let err = run_test(&d, &spec).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Truncation));

        let d = generate_dataset(10, &zero, 1.0, &mut stream(8, &[])).unwrap();
        let err = run_test(&d, &small_spec(1)).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Schedule));

        let d = generate_dataset(100, &zero, 0.0, &mut stream(8, &[])).unwrap();
        let mut spec = small_spec(1);
        spec.sigma = SigmaMode::Estimate;
        spec.baselines = false;
        let err = run_test(&d, &spec).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Statistic));
    }

    #[test]
    fn test_result_json_field_names() {
        let g = grid100();
        let zero = coefficient_function(CoefficientKind::Rho0, &g);
        let d = generate_dataset(60, &zero, 1.0, &mut stream(10, &[])).unwrap();
        let r = run_test(&d, &small_spec(2)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in [
            "W_n", "q", "reject", "k_hat", "D_n", "T_n", "reject_D", "reject_T", "schedule", "seed",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: TestResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
