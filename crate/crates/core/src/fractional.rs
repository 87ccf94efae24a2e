//! The fractional program behind the small-uniform statistic.
//!
//! In eigen-coordinates `b` the studentised projection is
//!
//! ```text
//! L(b) = <theta, b> / (sqrt(p(b)) + a_n),   p(b) = sum_j psi_j^2 b_j^2,
//! ```
//!
//! maximised over the closed unit ball. `L` is smooth away from the origin,
//! odd in `b`, and quasiconcave wherever the numerator is nonnegative, so a
//! projected gradient ascent from a handful of starts finds the global value.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::FpcaFit;

/// `theta`, `psi` and `a_n` of one maximisation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalObjective {
    theta: Vec<f64>,
    psi: Vec<f64>,
    a_n: f64,
}

impl FractionalObjective {
    pub fn new(theta: Vec<f64>, psi: Vec<f64>, a_n: f64) -> Result<Self> {
        if theta.len() != psi.len() || theta.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "theta and psi need equal positive length, got {} and {}",
                theta.len(),
                psi.len()
            )));
        }
        if psi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("psi must be positive and finite".into()));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("theta must be finite".into()));
        }
        if !(a_n > 0.0) || !a_n.is_finite() {
            return Err(Error::InvalidArgument(format!("a_n must be positive, got {a_n}")));
        }
        Ok(FractionalObjective { theta, psi, a_n })
    }

    /// Objective of a fitted slope, restricted to coordinates with a nonzero
    /// spectral weight. Coordinates with `f_n(lambda_j) = 0` have
    /// `theta_j = psi_j = 0` and can only spend norm budget, so dropping them
    /// leaves the supremum unchanged.
    pub fn from_fit(fit: &FpcaFit) -> Result<Self> {
        let (theta, psi): (Vec<f64>, Vec<f64>) = fit
            .rho_coords
            .iter()
            .zip(fit.psi())
            .filter(|(_, p)| *p > 0.0)
            .map(|(t, p)| (*t, p))
            .unzip();
        if psi.is_empty() {
            return Err(Error::NoActiveWeights { c_n: fit.scheme.c_n });
        }
        FractionalObjective::new(theta, psi, fit.a_n)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn a_n(&self) -> f64 {
        self.a_n
    }

    fn parts(&self, b: &[f64]) -> (f64, f64) {
        let f: f64 = self.theta.iter().zip(b).map(|(t, x)| t * x).sum();
        let p: f64 = self.psi.iter().zip(b).map(|(s, x)| s * s * x * x).sum();
        (f, p)
    }

    pub fn value(&self, b: &[f64]) -> f64 {
        let (f, p) = self.parts(b);
        f / (p.sqrt() + self.a_n)
    }

    pub fn gradient(&self, b: &[f64]) -> Result<Vec<f64>> {
        let (f, p) = self.parts(b);
        if !(p > 0.0) {
            return Err(Error::GradientAtOrigin);
        }
        let sp = p.sqrt();
        let g = sp + self.a_n;
        Ok(self
            .theta
            .iter()
            .zip(&self.psi)
            .zip(b)
            .map(|((t, s), x)| (t - x * s * s * f / (g * sp)) / g)
            .collect())
    }

    /// Second derivatives of `L`.
    ///
    /// `H_lm = -(theta_l u_m + theta_m u_l)/(g^2 sqrt p) - delta_lm psi_l^2 f/(g^2 sqrt p)
    ///         + u_l u_m f (2/(g^3 p) + 1/(g^2 p^{3/2}))`, with `u_l = psi_l^2 b_l`.
    pub fn hessian(&self, b: &[f64]) -> Result<DMatrix<f64>> {
        let (f, p) = self.parts(b);
        if !(p > 0.0) {
            return Err(Error::GradientAtOrigin);
        }
        let k = self.dim();
        let sp = p.sqrt();
        let g = sp + self.a_n;
        let u: Vec<f64> = self.psi.iter().zip(b).map(|(s, x)| s * s * x).collect();
        let c1 = 1.0 / (g * g * sp);
        let c2 = f * (2.0 / (g * g * g * p) + 1.0 / (g * g * p * sp));
        let mut h = DMatrix::zeros(k, k);
        for l in 0..k {
            for m in 0..=l {
                let mut v = -(self.theta[l] * u[m] + self.theta[m] * u[l]) * c1 + u[l] * u[m] * c2;
                if l == m {
                    v -= self.psi[l] * self.psi[l] * f * c1;
                }
                h[(l, m)] = v;
                h[(m, l)] = v;
            }
        }
        Ok(h)
    }
}

pub fn objective(obj: &FractionalObjective, b: &[f64]) -> f64 {
    obj.value(b)
}

pub fn gradient(obj: &FractionalObjective, b: &[f64]) -> Result<Vec<f64>> {
    obj.gradient(b)
}

pub fn hessian(obj: &FractionalObjective, b: &[f64]) -> Result<DMatrix<f64>> {
    obj.hessian(b)
}

/// Spherical to Cartesian coordinates:
/// `b_1 = r cos(phi_1)`, `b_i = r sin(phi_1)...sin(phi_{i-1}) cos(phi_i)`,
/// `b_k = r sin(phi_1)...sin(phi_{k-1})`.
pub fn to_cartesian(r: f64, phi: &[f64]) -> Vec<f64> {
    let k = phi.len() + 1;
    let mut b = Vec::with_capacity(k);
    let mut prod = r;
    for &a in phi {
        b.push(prod * a.cos());
        prod *= a.sin();
    }
    b.push(prod);
    b
}

/// Inverse of [`to_cartesian`] with `phi_i in [0, pi]` and the last angle in `[0, 2 pi)`.
pub fn to_spherical(b: &[f64]) -> (f64, Vec<f64>) {
    let k = b.len();
    let r = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut phi = Vec::with_capacity(k.saturating_sub(1));
    for i in 0..k.saturating_sub(1) {
        if i + 2 == k {
            let a = b[k - 1].atan2(b[k - 2]);
            phi.push(if a < 0.0 { a + std::f64::consts::TAU } else { a });
        } else {
            let tail = b[i + 1..].iter().map(|x| x * x).sum::<f64>().sqrt();
            phi.push(tail.atan2(b[i]));
        }
    }
    (r, phi)
}

/// Jacobian `d b / d (r, phi)` of [`to_cartesian`], `k x k`.
pub fn spherical_jacobian(r: f64, phi: &[f64]) -> DMatrix<f64> {
    let k = phi.len() + 1;
    let unit = to_cartesian(1.0, phi);
    let mut jac = DMatrix::zeros(k, k);
    for i in 0..k {
        jac[(i, 0)] = unit[i];
    }
    // b_i depends on phi_m for m <= i
    for m in 0..phi.len() {
        for i in m..k {
            let d = if i == m {
                let prefix: f64 = phi[..m].iter().map(|a| a.sin()).product();
                -r * prefix * phi[m].sin()
            } else {
                let mut v = r;
                for (q, a) in phi.iter().enumerate().take(i) {
                    v *= if q == m { a.cos() } else { a.sin() };
                }
                if i < phi.len() {
                    v *= phi[i].cos();
                }
                v
            };
            jac[(i, m + 1)] = d;
        }
    }
    jac
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SearchPath {
    /// Ascent in `b` with projection onto the unit ball.
    #[default]
    Cartesian,
    /// Box-constrained ascent in `(r, phi)`.
    Spherical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Random starts (sphere and interior points alternate).
    pub starts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub path: SearchPath,
    /// Also start from `theta/|theta|` and the `a_n = 0` maximiser.
    pub informed_starts: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            starts: 16,
            max_iters: 500,
            grad_tol: 1e-6,
            path: SearchPath::Cartesian,
            informed_starts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub best_value: f64,
    pub best_point: Vec<f64>,
    pub starts: usize,
    pub converged_starts: usize,
    /// `|P(b + grad L(b)) - b|` at the best point, `P` the ball projection.
    pub max_gradient_norm_at_best: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn project_ball(b: &mut [f64]) {
    let r = norm(b);
    if r > 1.0 {
        b.iter_mut().for_each(|x| *x /= r);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], project: &impl Fn(&mut [f64])) -> f64 {
    let mut y: Vec<f64> = x.iter().zip(g).map(|(a, b)| a + b).collect();
    project(&mut y);
    y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

struct Ascent {
    point: Vec<f64>,
    value: f64,
    converged: bool,
}

const NONMONOTONE_MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;

/// Spectral projected gradient ascent with a nonmonotone backtracking line search.
fn spg_ascent(
    x0: Vec<f64>,
    eval: impl Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
    project: impl Fn(&mut [f64]),
    cfg: &OptimizerConfig,
) -> Ascent {
    let mut x = x0;
    project(&mut x);
    let Some((mut fx, mut g)) = eval(&x) else {
        return Ascent {
            value: f64::NEG_INFINITY,
            point: x,
            converged: false,
        };
    };
    let mut history = vec![fx];
    let pg0 = projected_gradient_norm(&x, &g, &project);
    let mut step = if pg0 > 0.0 {
        (1.0 / pg0).clamp(STEP_MIN, STEP_MAX)
    } else {
        1.0
    };
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        if projected_gradient_norm(&x, &g, &project) < cfg.grad_tol {
            converged = true;
            break;
        }
        let mut trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + step * b).collect();
        project(&mut trial);
        let d: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope > 0.0) {
            converged = norm(&d) < cfg.grad_tol;
            break;
        }
        let reference = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut t = 1.0;
        let accepted = loop {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Some((fv, gv)) = eval(&xn) {
                if fv >= reference + ARMIJO * t * slope {
                    break Some((xn, fv, gv));
                }
            }
            t *= 0.5;
            if t < 1e-20 {
                break None;
            }
        };
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        // curvature of -L along s
        let sy: f64 = s
            .iter()
            .zip(g.iter().zip(&gnew))
            .map(|(a, (g0, g1))| a * (g0 - g1))
            .sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        step = if sy > 0.0 {
            (ss / sy).clamp(STEP_MIN, STEP_MAX)
        } else {
            STEP_MAX.min(1e6)
        };
        x = xn;
        fx = fnew;
        g = gnew;
        history.push(fx);
        if history.len() > NONMONOTONE_MEMORY {
            history.remove(0);
        }
    }
    Ascent {
        point: x,
        value: fx,
        converged,
    }
}

fn ascend_cartesian(obj: &FractionalObjective, start: Vec<f64>, cfg: &OptimizerConfig) -> Ascent {
    spg_ascent(
        start,
        |b| obj.gradient(b).ok().map(|g| (obj.value(b), g)),
        project_ball,
        cfg,
    )
}

const R_FLOOR: f64 = 1e-10;

fn ascend_spherical(obj: &FractionalObjective, start: Vec<f64>, cfg: &OptimizerConfig) -> Ascent {
    let k = obj.dim();
    if k == 1 {
        return ascend_cartesian(obj, start, cfg);
    }
    let (r, phi) = to_spherical(&start);
    let mut z = Vec::with_capacity(k);
    z.push(r);
    z.extend(phi);
    let project = move |z: &mut [f64]| {
        z[0] = z[0].clamp(R_FLOOR, 1.0);
        let last = z.len() - 1;
        for a in &mut z[1..last] {
            *a = a.clamp(0.0, std::f64::consts::PI);
        }
        z[last] = z[last].rem_euclid(std::f64::consts::TAU);
    };
    let eval = |z: &[f64]| {
        let b = to_cartesian(z[0], &z[1..]);
        let gb = obj.gradient(&b).ok()?;
        let jac = spherical_jacobian(z[0], &z[1..]);
        let gz: Vec<f64> = (0..k).map(|c| (0..k).map(|i| jac[(i, c)] * gb[i]).sum()).collect();
        Some((obj.value(&b), gz))
    };
    let a = spg_ascent(z, eval, project, cfg);
    let point = to_cartesian(a.point[0], &a.point[1..]);
    Ascent {
        value: obj.value(&point),
        point,
        converged: a.converged,
    }
}

fn random_start<R: Rng + ?Sized>(k: usize, interior: bool, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let r = norm(&v);
        if r > 0.0 {
            let scale = if interior {
                let u: f64 = rng.random();
                u.powf(1.0 / k as f64) / r
            } else {
                1.0 / r
            };
            v.iter_mut().for_each(|x| *x *= scale);
            if norm(&v) > 0.0 {
                return v;
            }
        }
    }
}

/// Multistart maximisation of `L` over the unit ball.
///
/// Starts with a negative objective are reflected through the origin, so
/// every start has `L >= 0`. Starts are optimised in parallel and reduced in
/// index order; ties keep the earliest start.
pub fn maximize<R: Rng + ?Sized>(obj: &FractionalObjective, config: &OptimizerConfig, rng: &mut R) -> OptimizerReport {
    let k = obj.dim();
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(config.starts + 2);
    if config.informed_starts && obj.theta.iter().any(|&t| t != 0.0) {
        let tn = norm(&obj.theta);
        starts.push(obj.theta.iter().map(|t| t / tn).collect());
        let cs: Vec<f64> = obj.theta.iter().zip(&obj.psi).map(|(t, p)| t / (p * p)).collect();
        let cn = norm(&cs);
        starts.push(cs.iter().map(|c| c / cn).collect());
    }
    for i in 0..config.starts.max(1) {
        starts.push(random_start(k, i % 2 == 1, rng));
    }
    for s in &mut starts {
        if obj.value(s) < 0.0 {
            s.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let runs: Vec<(f64, Ascent)> = starts
        .into_par_iter()
        .map(|s| {
            let v0 = obj.value(&s);
            let a = match config.path {
                SearchPath::Cartesian => ascend_cartesian(obj, s.clone(), config),
                SearchPath::Spherical => ascend_spherical(obj, s.clone(), config),
            };
            // never report less than the start itself
            if a.value >= v0 {
                (v0, a)
            } else {
                (
                    v0,
                    Ascent {
                        point: s,
                        value: v0,
                        converged: a.converged,
                    },
                )
            }
        })
        .collect();

    let n_starts = runs.len();
    let converged_starts = runs.iter().filter(|(_, a)| a.converged).count();
    let mut best: Option<&Ascent> = None;
    for (_, a) in &runs {
        if best.is_none_or(|b| a.value > b.value) {
            best = Some(a);
        }
    }
    let best = best.expect("at least one start");
    let grad_norm = obj
        .gradient(&best.point)
        .map(|g| projected_gradient_norm(&best.point, &g, &project_ball))
        .unwrap_or(0.0);
    OptimizerReport {
        best_value: best.value.max(0.0),
        best_point: best.point.clone(),
        starts: n_starts,
        converged_starts,
        max_gradient_norm_at_best: grad_norm,
    }
}

/// `W_n = sqrt(n) / (sigma * beta_n) * sup_{|b| <= 1} L(b)`.
pub fn small_uniform_statistic<R: Rng + ?Sized>(
    fit: &FpcaFit,
    beta_n: f64,
    config: &OptimizerConfig,
    rng: &mut R,
) -> Result<(f64, OptimizerReport)> {
    if !(beta_n > 0.0) || !beta_n.is_finite() {
        return Err(Error::InvalidArgument(format!("beta_n must be positive, got {beta_n}")));
    }
    if !(fit.sigma_eps > 0.0) {
        return Err(Error::ZeroSigma);
    }
    let obj = FractionalObjective::from_fit(fit)?;
    let report = maximize(&obj, config, rng);
    let w = (fit.n as f64).sqrt() / (fit.sigma_eps * beta_n) * report.best_value;
    Ok((w, report))
}
