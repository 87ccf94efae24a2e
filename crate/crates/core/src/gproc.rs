//! Simulation of the limiting Gaussian supremum.
//!
//! The limit of `W_n` is `sup_h G(h) / beta_n` for a mean-zero Gaussian
//! process indexed by the unit ball of the first `K_n` eigen-directions, with
//! covariance
//!
//! ```text
//! c(x, y) = sum_j w_j x_j y_j / ((sqrt(sum_j w_j x_j^2) + a_n)(sqrt(sum_j w_j y_j^2) + a_n)),
//! w_j = lambda_j f_n(lambda_j)^2.
//! ```
//!
//! The process is observed on a finite set of index points, the covariance
//! matrix is factorised once, and each replication records the maximum of
//! one multivariate normal draw.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::FpcaFit;
use crate::rng::stream;

/// Jitter levels tried before falling back to eigenvalue clipping.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];
/// Most negative eigenvalue (relative to the largest) accepted by clipping.
pub const CLIP_TOLERANCE: f64 = 1e-6;
const BATCH: usize = 256;

/// Spectral description of the limiting covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpKernel {
    lambda: Vec<f64>,
    fvals: Vec<f64>,
    a_n: f64,
}

impl GpKernel {
    pub fn new(lambda: Vec<f64>, fvals: Vec<f64>, a_n: f64) -> Result<Self> {
        if lambda.is_empty() || lambda.len() != fvals.len() {
            return Err(Error::InvalidArgument(
                "lambda and f_n values need equal positive length".into(),
            ));
        }
        if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("eigenvalues must be positive".into()));
        }
        if fvals.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) {
            return Err(Error::InvalidArgument("f_n values must be nonnegative".into()));
        }
        if !(a_n > 0.0) || !a_n.is_finite() {
            return Err(Error::InvalidArgument(format!("a_n must be positive, got {a_n}")));
        }
        Ok(GpKernel { lambda, fvals, a_n })
    }

    /// Empirical plug-in kernel of a fit, restricted to active spectral weights.
    pub fn from_fit(fit: &FpcaFit) -> Result<Self> {
        let (lambda, fvals): (Vec<f64>, Vec<f64>) = fit
            .eigenvalues()
            .iter()
            .zip(fit.weights())
            .filter(|(_, f)| *f > 0.0)
            .map(|(l, f)| (*l, f))
            .unzip();
        if lambda.is_empty() {
            return Err(Error::NoActiveWeights { c_n: fit.scheme.c_n });
        }
        GpKernel::new(lambda, fvals, fit.a_n)
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn fvals(&self) -> &[f64] {
        &self.fvals
    }

    pub fn a_n(&self) -> f64 {
        self.a_n
    }
}

pub fn kernel_eval(k: &GpKernel, x: &[f64], y: &[f64]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for j in 0..k.dim() {
        let w = k.lambda[j] * k.fvals[j] * k.fvals[j];
        xy += w * x[j] * y[j];
        xx += w * x[j] * x[j];
        yy += w * y[j] * y[j];
    }
    xy / ((xx.sqrt() + k.a_n) * (yy.sqrt() + k.a_n))
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if r > 0.0 {
            return v.into_iter().map(|x| x / r).collect();
        }
    }
}

/// Index points: `n_boundary` uniform on the unit sphere, then `n_interior`
/// uniform in the ball (sphere draw scaled by `U^{1/dim}`).
pub fn sample_index_points<R: Rng + ?Sized>(
    dim: usize,
    n_boundary: usize,
    n_interior: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || n_boundary == 0 || n_interior == 0 {
        return Err(Error::InvalidArgument(
            "index point counts and dimension must be positive".into(),
        ));
    }
    let mut pts = Vec::with_capacity(n_boundary + n_interior);
    for _ in 0..n_boundary {
        pts.push(unit_gaussian(dim, rng));
    }
    for _ in 0..n_interior {
        let mut v = unit_gaussian(dim, rng);
        let u: f64 = rng.random();
        let r = u.powf(1.0 / dim as f64);
        v.iter_mut().for_each(|x| *x *= r);
        pts.push(v);
    }
    Ok(pts)
}

pub fn covariance_matrix(k: &GpKernel, points: &[Vec<f64>]) -> DMatrix<f64> {
    let m = points.len();
    let mut c = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..=a {
            let v = kernel_eval(k, &points[a], &points[b]);
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Factorization {
    Cholesky { jitter: f64 },
    EigenClipped { min_eigenvalue: f64 },
}

/// A square root `L` with `L L^T ~ cov`.
pub fn factorize(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, Factorization)> {
    let m = cov.nrows();
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::KernelNotPsd {
            min_eigenvalue: f64::NAN,
        });
    }
    for &jitter in &JITTER_LADDER {
        let mut a = cov.clone();
        for i in 0..m {
            a[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(a) {
            return Ok((ch.l(), Factorization::Cholesky { jitter }));
        }
    }
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min < -CLIP_TOLERANCE * max.max(1.0) {
        return Err(Error::KernelNotPsd { min_eigenvalue: min });
    }
    let mut root = eig.eigenvectors;
    for (j, mut col) in root.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[j].max(0.0).sqrt();
    }
    Ok((root, Factorization::EigenClipped { min_eigenvalue: min }))
}

/// Simulated suprema, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupSimResult {
    pub samples: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub points: usize,
    pub factorization: Factorization,
}

/// Draws `reps` maxima of the process over `points`.
///
/// Batch `i` uses its own stream derived from `(seed, i)` and the samples are
/// sorted, so the result does not depend on the thread count.
pub fn simulate_sup(k: &GpKernel, points: &[Vec<f64>], reps: usize, seed: u64) -> Result<SupSimResult> {
    if points.is_empty() || reps == 0 {
        return Err(Error::InvalidArgument(
            "need at least one point and one replication".into(),
        ));
    }
    if points.iter().any(|p| p.len() != k.dim()) {
        return Err(Error::InvalidArgument(
            "index point dimension does not match the kernel".into(),
        ));
    }
    let cov = covariance_matrix(k, points);
    let (root, factorization) = factorize(&cov)?;
    let m = points.len();
    let batches = reps.div_ceil(BATCH);
    let chunks: Vec<Vec<f64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let size = BATCH.min(reps - b * BATCH);
            let mut rng = stream(seed, &[b as u64]);
            let z = DMatrix::from_fn(m, size, |_, _| rng.sample::<f64, _>(StandardNormal));
            let paths = &root * z;
            paths.column_iter().map(|c| c.max()).collect()
        })
        .collect();
    let mut samples: Vec<f64> = chunks.into_iter().flatten().collect();
    samples.sort_by(f64::total_cmp);
    Ok(SupSimResult {
        samples,
        reps,
        seed,
        points: m,
        factorization,
    })
}

/// Nearest-rank `(1 - alpha)` quantile of `samples / beta_n`.
pub fn quantile(result: &SupSimResult, beta_n: f64, alpha: f64) -> Result<f64> {
    if result.samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(beta_n > 0.0) || !beta_n.is_finite() {
        return Err(Error::InvalidArgument(format!("beta_n must be positive, got {beta_n}")));
    }
    let n = result.samples.len();
    let rank = (((1.0 - alpha) * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(result.samples[rank - 1] / beta_n)
}

impl SupSimResult {
    pub fn quantile(&self, beta_n: f64, alpha: f64) -> Result<f64> {
        quantile(self, beta_n, alpha)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r: SupSimResult = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        r.samples.sort_by(f64::total_cmp);
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub n_boundary: usize,
    pub n_interior: usize,
    pub reps: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            n_boundary: 312,
            n_interior: 313,
            reps: 20_000,
        }
    }
}

/// Index points from `(seed, 0)`, paths from `(seed, 1)`.
pub fn simulate_null(k: &GpKernel, cfg: &GpConfig, seed: u64) -> Result<SupSimResult> {
    let pts = sample_index_points(k.dim(), cfg.n_boundary, cfg.n_interior, &mut stream(seed, &[0]))?;
    simulate_sup(k, &pts, cfg.reps, crate::rng::derive_seed(seed, &[1]))
}
