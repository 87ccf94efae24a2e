//! Functional principal components regression.
//!
//! The covariance operator `(Gamma_n e)(s) = int G(s,t) e(t) dt` is discretised
//! with trapezoid weights `W`. Its eigenproblem `G W e = lambda e` is solved in
//! the symmetric form `W^{1/2} G W^{1/2} v = lambda v`, `e = W^{-1/2} v`, which
//! keeps the eigenfunctions orthonormal in the quadrature inner product.
//!
//! The slope estimator has coordinates
//! `<rho_hat, e_j> = f_n(lambda_j) (1/n) sum_i <X_i, e_j> Y_i`, `j <= k_hat`,
//! where `f_n` is a thresholded approximate reciprocal (see
//! [`RegularizationScheme`]).

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnspace::{same_grid, weighted_dot, Dataset, FunctionalSample, Grid};

/// Eigenvalues at or below this multiple of the leading eigenvalue are dropped.
pub const DEFAULT_RELATIVE_FLOOR: f64 = 1e-12;
/// Gaps below this multiple of the leading eigenvalue are reported as near-ties.
pub const NEAR_TIE_RELATIVE: f64 = 1e-10;

/// `G[s,t] = (1/n) sum_i X_i(s) X_i(t)`.
pub fn empirical_covariance(data: &Dataset) -> DMatrix<f64> {
    let x = data.x();
    let mut g = x.tr_mul(x);
    g /= data.n() as f64;
    // exact symmetry
    let m = g.nrows();
    for a in 0..m {
        for b in (a + 1)..m {
            let v = 0.5 * (g[(a, b)] + g[(b, a)]);
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

/// Retained empirical eigenelements, sorted by decreasing eigenvalue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Eigensystem {
    grid: Arc<Grid>,
    eigenvalues: Vec<f64>,
    eigenfunctions: Vec<Vec<f64>>,
    gaps: Vec<f64>,
}

/// Spectral gaps `delta_j` of a decreasing sequence.
///
/// `delta_1 = l_1 - l_2`, `delta_j = min(l_j - l_{j+1}, l_{j-1} - l_j)`. The
/// last entry has no successor and uses only the backward gap; a lone
/// eigenvalue is separated from zero, so its gap is the eigenvalue itself.
pub fn spectral_gaps(values: &[f64]) -> Vec<f64> {
    let r = values.len();
    match r {
        0 => Vec::new(),
        1 => vec![values[0]],
        _ => (0..r)
            .map(|j| {
                if j == 0 {
                    values[0] - values[1]
                } else if j == r - 1 {
                    values[j - 1] - values[j]
                } else {
                    (values[j] - values[j + 1]).min(values[j - 1] - values[j])
                }
            })
            .collect(),
    }
}

/// `max {p : values_p + gaps_p / 2 >= c_n}` (1-based), if any.
pub fn truncation_rule(values: &[f64], gaps: &[f64], c_n: f64) -> Option<usize> {
    values
        .iter()
        .zip(gaps)
        .enumerate()
        .rfind(|(_, (l, d))| *l + *d / 2.0 >= c_n)
        .map(|(p, _)| p + 1)
}

impl Eigensystem {
    /// Assembles an eigensystem from sorted eigenpairs; gaps are recomputed.
    pub fn from_parts(grid: Arc<Grid>, eigenvalues: Vec<f64>, eigenfunctions: Vec<Vec<f64>>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::DegenerateCovariance);
        }
        if eigenvalues.len() != eigenfunctions.len() || eigenfunctions.iter().any(|e| e.len() != grid.len()) {
            return Err(Error::GridMismatch);
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) || eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidArgument(
                "eigenvalues must be positive and nonincreasing".into(),
            ));
        }
        let gaps = spectral_gaps(&eigenvalues);
        Ok(Eigensystem {
            grid,
            eigenvalues,
            eigenfunctions,
            gaps,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    /// Values of `e_j` on the grid, 0-based `j`.
    pub fn eigenfunction_values(&self, j: usize) -> &[f64] {
        &self.eigenfunctions[j]
    }

    pub fn eigenfunction(&self, j: usize) -> FunctionalSample {
        FunctionalSample::new(self.grid.clone(), self.eigenfunctions[j].clone())
            .expect("eigenfunctions match their grid")
    }

    /// `<f, e_j>` for `j < k`.
    pub fn coordinates(&self, f: &FunctionalSample, k: usize) -> Result<Vec<f64>> {
        if !same_grid(&self.grid, f.grid()) {
            return Err(Error::GridMismatch);
        }
        Ok(self.eigenfunctions[..k]
            .iter()
            .map(|e| weighted_dot(self.grid.weights(), e, f.values()))
            .collect())
    }

    /// `sum_j coords[j] e_j(t)` on the grid.
    pub fn synthesize(&self, coords: &[f64]) -> FunctionalSample {
        let mut v = vec![0.0; self.grid.len()];
        for (c, e) in coords.iter().zip(&self.eigenfunctions) {
            for (a, b) in v.iter_mut().zip(e) {
                *a += c * b;
            }
        }
        FunctionalSample::new(self.grid.clone(), v).expect("finite synthesis")
    }
}

/// Solves the weighted operator eigenproblem of a covariance kernel on `grid`.
///
/// Eigenvalues at or below `relative_floor * lambda_1` are dropped. Each
/// eigenfunction is scaled to unit quadrature norm and oriented so that its
/// largest-magnitude value is positive.
pub fn eigensolve(g: &DMatrix<f64>, grid: &Arc<Grid>, relative_floor: f64) -> Result<Eigensystem> {
    let m = grid.len();
    if g.nrows() != m || g.ncols() != m {
        return Err(Error::GridMismatch);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "covariance kernel has non-finite entries".into(),
        ));
    }
    let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(m, m, |s, t| {
        let v = 0.5 * (g[(s, t)] + g[(t, s)]);
        sw[s] * v * sw[t]
    });
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let lead = eig.eigenvalues[order[0]];
    if !(lead > 0.0) {
        return Err(Error::DegenerateCovariance);
    }
    let floor = relative_floor.max(0.0) * lead;

    let mut values = Vec::new();
    let mut functions = Vec::new();
    for &idx in &order {
        let lam = eig.eigenvalues[idx];
        if lam <= floor {
            break;
        }
        let v = eig.eigenvectors.column(idx);
        let mut e: Vec<f64> = (0..m).map(|s| v[s] / sw[s]).collect();
        let norm = weighted_dot(grid.weights(), &e, &e).sqrt();
        let (mut peak, mut peak_abs) = (0.0, -1.0);
        for &x in &e {
            if x.abs() > peak_abs {
                peak_abs = x.abs();
                peak = x;
            }
        }
        let scale = if peak < 0.0 { -1.0 / norm } else { 1.0 / norm };
        e.iter_mut().for_each(|x| *x *= scale);
        values.push(lam);
        functions.push(e);
    }
    if values.is_empty() {
        return Err(Error::DegenerateCovariance);
    }
    for (j, w) in values.windows(2).enumerate() {
        if w[0] - w[1] < NEAR_TIE_RELATIVE * lead {
            log::warn!(
                "near-tie between eigenvalues {} and {} ({:e} vs {:e})",
                j + 1,
                j + 2,
                w[0],
                w[1]
            );
        }
    }
    let gaps = spectral_gaps(&values);
    Ok(Eigensystem {
        grid: grid.clone(),
        eigenvalues: values,
        eigenfunctions: functions,
        gaps,
    })
}

/// Empirical truncation `k_hat = max {p : lambda_p + delta_p / 2 >= c_n}`.
pub fn truncation(eig: &Eigensystem, c_n: f64) -> Result<usize> {
    if !(c_n > 0.0) || !c_n.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "threshold c_n must be positive, got {c_n}"
        )));
    }
    truncation_rule(&eig.eigenvalues, &eig.gaps, c_n).ok_or(Error::TruncationEmpty { c_n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    /// `f_n(x) = 1/x` on `[c_n, inf)`
    Simple,
    /// `f_n(x) = 1/(x + alpha_n)` on `[c_n, inf)`
    Ridge,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Simple => "simple",
            SchemeKind::Ridge => "ridge",
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simple" | "reciprocal" => Ok(SchemeKind::Simple),
            "ridge" => Ok(SchemeKind::Ridge),
            other => Err(Error::InvalidArgument(format!(
                "unknown regularization scheme `{other}`"
            ))),
        }
    }
}

/// Approximate reciprocal `f_n` with support `[c_n, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationScheme {
    pub kind: SchemeKind,
    pub c_n: f64,
    pub alpha_n: f64,
}

impl RegularizationScheme {
    pub fn simple(c_n: f64) -> Result<Self> {
        Self::new(SchemeKind::Simple, c_n, 0.0)
    }

    pub fn ridge(c_n: f64, alpha_n: f64) -> Result<Self> {
        Self::new(SchemeKind::Ridge, c_n, alpha_n)
    }

    pub fn new(kind: SchemeKind, c_n: f64, alpha_n: f64) -> Result<Self> {
        if !(c_n > 0.0) || !c_n.is_finite() {
            return Err(Error::InvalidArgument(format!("c_n must be positive, got {c_n}")));
        }
        let alpha_n = match kind {
            SchemeKind::Simple => 0.0,
            SchemeKind::Ridge => {
                if !(alpha_n > 0.0) || !alpha_n.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "ridge scheme needs alpha_n > 0, got {alpha_n}"
                    )));
                }
                alpha_n
            }
        };
        Ok(RegularizationScheme { kind, c_n, alpha_n })
    }

    pub fn f_n(&self, x: f64) -> f64 {
        f_n(self, x)
    }
}

pub fn f_n(scheme: &RegularizationScheme, x: f64) -> f64 {
    if !(x >= scheme.c_n) {
        return 0.0;
    }
    match scheme.kind {
        SchemeKind::Simple => 1.0 / x,
        SchemeKind::Ridge => 1.0 / (x + scheme.alpha_n),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    Known(f64),
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationRule {
    /// `k_hat` from the empirical eigenvalues and `c_n`.
    Empirical,
    /// Externally supplied truncation.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub scheme: RegularizationScheme,
    pub a_n: f64,
    pub sigma: SigmaMode,
    pub truncation: TruncationRule,
}

/// Fitted FPCA slope with everything the small-uniform statistic needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcaFit {
    pub n: usize,
    pub k_hat: usize,
    pub rho_coords: Vec<f64>,
    pub eig: Eigensystem,
    pub scheme: RegularizationScheme,
    pub a_n: f64,
    pub sigma_eps: f64,
    pub sigma_estimated: bool,
}

/// Scores `<X_i, e_j>` as an `n x k` matrix.
pub fn scores(data: &Dataset, eig: &Eigensystem, k: usize) -> Result<DMatrix<f64>> {
    if !same_grid(data.grid(), &eig.grid) {
        return Err(Error::GridMismatch);
    }
    let m = eig.grid.len();
    let w = eig.grid.weights();
    let basis = DMatrix::from_fn(m, k, |s, j| w[s] * eig.eigenfunctions[j][s]);
    Ok(data.x() * basis)
}

/// `Delta_j = (1/n) sum_i <X_i, e_j> Y_i` for `j < k`.
pub fn cross_covariance(data: &Dataset, eig: &Eigensystem, k: usize) -> Result<Vec<f64>> {
    let s = scores(data, eig, k)?;
    let y = DVector::from_column_slice(data.y());
    let d = s.tr_mul(&y) / data.n() as f64;
    Ok(d.iter().copied().collect())
}

pub fn fit(data: &Dataset, opts: &FitOptions) -> Result<FpcaFit> {
    let eig = eigensolve(&empirical_covariance(data), data.grid(), DEFAULT_RELATIVE_FLOOR)?;
    fit_with_eigensystem(data, eig, opts)
}

/// Fits the slope with a precomputed eigensystem of the same curves.
pub fn fit_with_eigensystem(data: &Dataset, eig: Eigensystem, opts: &FitOptions) -> Result<FpcaFit> {
    if !(opts.a_n > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "roughening a_n must be positive, got {}",
            opts.a_n
        )));
    }
    let k = match opts.truncation {
        TruncationRule::Empirical => truncation(&eig, opts.scheme.c_n)?,
        TruncationRule::Fixed(k) => {
            if k == 0 || k > eig.len() {
                return Err(Error::InvalidArgument(format!(
                    "fixed truncation {k} outside 1..={}",
                    eig.len()
                )));
            }
            k
        }
    };
    let s = scores(data, &eig, k)?;
    let y = DVector::from_column_slice(data.y());
    let n = data.n() as f64;
    let delta = s.tr_mul(&y) / n;
    let rho_coords: Vec<f64> = delta
        .iter()
        .zip(&eig.eigenvalues)
        .map(|(d, &l)| opts.scheme.f_n(l) * d)
        .collect();
    let (sigma_eps, sigma_estimated) = match opts.sigma {
        SigmaMode::Known(s) => {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "sigma must be finite and nonnegative, got {s}"
                )));
            }
            (s, false)
        }
        SigmaMode::Estimate => {
            let fitted = &s * DVector::from_column_slice(&rho_coords);
            let rss: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            ((rss / n).sqrt(), true)
        }
    };
    Ok(FpcaFit {
        n: data.n(),
        k_hat: k,
        rho_coords,
        eig,
        scheme: opts.scheme,
        a_n: opts.a_n,
        sigma_eps,
        sigma_estimated,
    })
}

impl FpcaFit {
    /// `f_n(lambda_j)` for `j <= k_hat`.
    pub fn weights(&self) -> Vec<f64> {
        self.eig.eigenvalues[..self.k_hat]
            .iter()
            .map(|&l| self.scheme.f_n(l))
            .collect()
    }

    /// `psi_j = sqrt(lambda_j) f_n(lambda_j)`.
    pub fn psi(&self) -> Vec<f64> {
        self.eig.eigenvalues[..self.k_hat]
            .iter()
            .map(|&l| l.sqrt() * self.scheme.f_n(l))
            .collect()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eig.eigenvalues[..self.k_hat]
    }

    pub fn t_hat(&self, b: &[f64]) -> Result<f64> {
        t_hat(self, b)
    }

    pub fn predict(&self, x: &FunctionalSample) -> Result<f64> {
        predict(self, x)
    }

    /// `rho_hat(t) = sum_j <rho_hat, e_j> e_j(t)`.
    pub fn rho_hat(&self) -> FunctionalSample {
        self.eig.synthesize(&self.rho_coords)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let fit: FpcaFit = serde_json::from_str(s)?;
        if fit.k_hat == 0 || fit.k_hat > fit.eig.len() || fit.rho_coords.len() != fit.k_hat {
            return Err(Error::InvalidArgument("inconsistent fit document".into()));
        }
        Ok(fit)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Roughened standard deviation `sqrt(sum_j lambda_j f_n(lambda_j)^2 b_j^2) + a_n`.
pub fn t_hat(fit: &FpcaFit, b: &[f64]) -> Result<f64> {
    if b.len() != fit.k_hat {
        return Err(Error::InvalidArgument(format!(
            "expected {} coordinates, got {}",
            fit.k_hat,
            b.len()
        )));
    }
    let s: f64 = fit.psi().iter().zip(b).map(|(p, x)| p * p * x * x).sum();
    Ok(s.sqrt() + fit.a_n)
}

/// `<rho_hat, x> = sum_j <rho_hat, e_j> <x, e_j>`.
pub fn predict(fit: &FpcaFit, x: &FunctionalSample) -> Result<f64> {
    let c = fit.eig.coordinates(x, fit.k_hat)?;
    Ok(c.iter().zip(&fit.rho_coords).map(|(a, b)| a * b).sum())
}
