//! Discretised `L^2([0, 1])`.
//!
//! Functions live on a shared [`Grid`] of abscissae with trapezoid weights.
//! Inner products are quadrature sums `sum_k w_k f(t_k) g(t_k)`. The module
//! also carries the generators used by the simulation study: Brownian paths
//! built from exact Gaussian increments, the three coefficient functions and
//! the analytic Brownian eigenelements.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of grid points.
pub const DEFAULT_GRID_SIZE: usize = 100;

/// Abscissae on `[0, 1]` with trapezoid quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    points: Vec<f64>,
}

impl TryFrom<GridRepr> for Grid {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        Grid::new(r.points)
    }
}

impl From<Grid> for GridRepr {
    fn from(g: Grid) -> Self {
        GridRepr { points: g.points }
    }
}

impl Grid {
    /// Builds a grid from strictly increasing points starting at 0 and ending at 1.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two points".into()));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite abscissa".into()));
        }
        if points[0] != 0.0 || points[points.len() - 1] != 1.0 {
            return Err(Error::InvalidGrid("points must start at 0 and end at 1".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        let m = points.len();
        let mut weights = vec![0.0; m];
        for k in 0..m - 1 {
            let h = 0.5 * (points[k + 1] - points[k]);
            weights[k] += h;
            weights[k + 1] += h;
        }
        Ok(Grid { points, weights })
    }

    pub fn equispaced(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidGrid("need at least two points".into()));
        }
        let last = (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|k| k as f64 / last).collect();
        points[m - 1] = 1.0;
        Grid::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `min(s, t)` Brownian covariance kernel sampled on the grid.
    pub fn brownian_kernel(&self) -> DMatrix<f64> {
        let m = self.len();
        DMatrix::from_fn(m, m, |a, b| self.points[a].min(self.points[b]))
    }

    /// Quadrature form `sum_{s,t} w_s w_t K(s,t) f(s) g(t)`.
    pub fn bilinear(&self, kernel: &DMatrix<f64>, f: &[f64], g: &[f64]) -> f64 {
        let w = &self.weights;
        let mut acc = 0.0;
        for s in 0..self.len() {
            let mut row = 0.0;
            for t in 0..self.len() {
                row += kernel[(s, t)] * w[t] * g[t];
            }
            acc += w[s] * f[s] * row;
        }
        acc
    }
}

pub(crate) fn same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> bool {
    Arc::ptr_eq(a, b) || a.points == b.points
}

/// A function sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSample {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl FunctionalSample {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("function values must be finite".into()));
        }
        Ok(FunctionalSample { grid, values })
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.points().iter().map(|&t| f(t)).collect();
        FunctionalSample { grid, values }
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let values = vec![0.0; grid.len()];
        FunctionalSample { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        weighted_dot(self.grid.weights(), &self.values, &self.values).sqrt()
    }
}

pub(crate) fn weighted_dot(w: &[f64], f: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(f).zip(g).map(|((w, a), b)| w * a * b).sum()
}

/// Trapezoid inner product `<f, g>`.
pub fn inner_product(f: &FunctionalSample, g: &FunctionalSample) -> Result<f64> {
    if !same_grid(&f.grid, &g.grid) {
        return Err(Error::GridMismatch);
    }
    Ok(weighted_dot(f.grid.weights(), &f.values, &g.values))
}

/// Draws a standard Brownian path on the grid from independent Gaussian increments.
pub fn brownian_sample<R: Rng + ?Sized>(grid: &Arc<Grid>, rng: &mut R) -> FunctionalSample {
    let mut values = Vec::with_capacity(grid.len());
    fill_brownian(grid, rng, &mut values);
    FunctionalSample {
        grid: grid.clone(),
        values,
    }
}

fn fill_brownian<R: Rng + ?Sized>(grid: &Grid, rng: &mut R, out: &mut Vec<f64>) {
    let pts = grid.points();
    let mut b = 0.0;
    out.push(b);
    for w in pts.windows(2) {
        let z: f64 = rng.sample(StandardNormal);
        b += (w[1] - w[0]).sqrt() * z;
        out.push(b);
    }
}

/// Coefficient functions of the simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientKind {
    /// `rho(t) = 0`
    Rho0,
    /// `sin(pi t/2) + sin(3 pi t/2)/2 + sin(5 pi t/2)/4`
    Rho1,
    /// `sin(2 pi t^3)^3`
    Rho2,
}

impl CoefficientKind {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            CoefficientKind::Rho0 => 0.0,
            CoefficientKind::Rho1 => {
                (PI * t / 2.0).sin() + 0.5 * (3.0 * PI * t / 2.0).sin() + 0.25 * (5.0 * PI * t / 2.0).sin()
            }
            CoefficientKind::Rho2 => (2.0 * PI * t.powi(3)).sin().powi(3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CoefficientKind::Rho0 => "rho0",
            CoefficientKind::Rho1 => "rho1",
            CoefficientKind::Rho2 => "rho2",
        }
    }
}

impl std::str::FromStr for CoefficientKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rho0" | "zero" | "0" => Ok(CoefficientKind::Rho0),
            "rho1" => Ok(CoefficientKind::Rho1),
            "rho2" => Ok(CoefficientKind::Rho2),
            other => Err(Error::InvalidArgument(format!(
                "unknown coefficient function `{other}`"
            ))),
        }
    }
}

pub fn coefficient_function(kind: CoefficientKind, grid: &Arc<Grid>) -> FunctionalSample {
    FunctionalSample::from_fn(grid.clone(), |t| kind.eval(t))
}

/// `lambda_j = 4 / ((2j - 1) pi)^2`, `j >= 1`.
pub fn brownian_eigenvalue(j: usize) -> f64 {
    assert!(j >= 1, "eigen index starts at 1");
    let d = (2 * j - 1) as f64 * PI;
    4.0 / (d * d)
}

/// `(lambda_j, e_j)` with `e_j(t) = sqrt(2) sin((2j - 1) pi t / 2)`.
pub fn brownian_eigenelements(j: usize, grid: &Arc<Grid>) -> Result<(f64, FunctionalSample)> {
    if j == 0 {
        return Err(Error::InvalidArgument("eigen index starts at 1".into()));
    }
    let freq = (2 * j - 1) as f64 * PI / 2.0;
    let e = FunctionalSample::from_fn(grid.clone(), |t| SQRT_2 * (freq * t).sin());
    Ok((brownian_eigenvalue(j), e))
}

/// `n` curves on one grid with scalar responses.
#[derive(Debug, Clone)]
pub struct Dataset {
    grid: Arc<Grid>,
    /// `n x m`, one curve per row.
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(grid: Arc<Grid>, x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.ncols() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if x.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "{} curves but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if y.len() < 2 {
            return Err(Error::InvalidArgument("need at least two observations".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Dataset { grid, x, y })
    }

    pub fn from_samples(xs: &[FunctionalSample], y: Vec<f64>) -> Result<Self> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let grid = first.grid.clone();
        let m = grid.len();
        let mut x = DMatrix::zeros(xs.len(), m);
        for (i, s) in xs.iter().enumerate() {
            if !same_grid(&grid, &s.grid) {
                return Err(Error::GridMismatch);
            }
            for k in 0..m {
                x[(i, k)] = s.values[k];
            }
        }
        Dataset::new(grid, x, y)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn curve(&self, i: usize) -> FunctionalSample {
        FunctionalSample {
            grid: self.grid.clone(),
            values: self.x.row(i).iter().copied().collect(),
        }
    }

    /// Same curves, new responses.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self> {
        Dataset::new(self.grid.clone(), self.x.clone(), y)
    }

    /// Scores `<X_i, f>` for every curve.
    pub fn project(&self, f: &FunctionalSample) -> Result<Vec<f64>> {
        if !same_grid(&self.grid, &f.grid) {
            return Err(Error::GridMismatch);
        }
        let wf: Vec<f64> = self.grid.weights().iter().zip(&f.values).map(|(w, v)| w * v).collect();
        Ok(self
            .x
            .row_iter()
            .map(|row| row.iter().zip(&wf).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// `Y_i = <rho, X_i> + eps_i` with Brownian `X_i` and `eps_i ~ N(0, sigma_eps^2)`.
pub fn generate_dataset<R: Rng + ?Sized>(
    n: usize,
    rho: &FunctionalSample,
    sigma_eps: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !sigma_eps.is_finite() || sigma_eps < 0.0 {
        return Err(Error::InvalidArgument(
            "sigma_eps must be finite and nonnegative".into(),
        ));
    }
    let grid = rho.grid.clone();
    let m = grid.len();
    let mut x = DMatrix::zeros(n, m);
    let mut y = Vec::with_capacity(n);
    let mut path = Vec::with_capacity(m);
    for i in 0..n {
        path.clear();
        fill_brownian(&grid, rng, &mut path);
        for (k, v) in path.iter().enumerate() {
            x[(i, k)] = *v;
        }
        let signal = weighted_dot(grid.weights(), &path, &rho.values);
        let eps: f64 = rng.sample(StandardNormal);
        y.push(signal + sigma_eps * eps);
    }
    Dataset::new(grid, x, y)
}

/// `Var <X, rho>` for Brownian `X`, i.e. the double integral of `min(s,t) rho(s) rho(t)`.
pub fn signal_variance(rho: &FunctionalSample) -> f64 {
    let g = rho.grid();
    g.bilinear(&g.brownian_kernel(), &rho.values, &rho.values)
}

/// Noise level giving the requested signal-to-noise ratio:
/// `sigma^2 = (1 - snr) / snr * Var <X, rho>`.
pub fn snr_sigma(rho: &FunctionalSample, snr: f64) -> Result<f64> {
    if !(snr > 0.0 && snr < 1.0) {
        return Err(Error::InvalidArgument(format!("snr must lie in (0, 1), got {snr}")));
    }
    if rho.is_zero() {
        return Err(Error::ZeroSignal);
    }
    let v = signal_variance(rho);
    if v <= 0.0 {
        return Err(Error::ZeroSignal);
    }
    Ok(((1.0 - snr) / snr * v).sqrt())
}
