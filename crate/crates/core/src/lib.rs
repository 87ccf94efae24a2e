//! Small-uniform inference for the scalar-on-function linear model
//! `Y = <rho, X> + eps`.
//!
//! The crate is organised bottom-up:
//!
//! - [`fnspace`]: functions on a discretised `[0, 1]`, trapezoid inner
//!   products, Brownian paths and the simulation coefficient functions.
//! - [`fpca`]: empirical covariance, weighted eigensolve, truncation,
//!   spectral regularisation and the FPCA slope estimator.
//! - [`fractional`]: the fractional objective behind `W_n`, its analytic
//!   derivatives and a multistart projected-gradient maximiser.
//! - [`gproc`]: the limiting Gaussian supremum and its simulated quantiles.
//! - [`testing`]: the end-to-end hypothesis test plus the `D_n`/`T_n`
//!   baselines.
//! - [`harness`]: Monte Carlo size/power studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fnspace;
pub mod fpca;
pub mod fractional;
pub mod gproc;
pub mod harness;
pub mod rng;
pub mod testing;

pub use error::{Error, Result, Stage};
pub use fnspace::{CoefficientKind, Dataset, FunctionalSample, Grid};
pub use fpca::{Eigensystem, FitOptions, FpcaFit, RegularizationScheme, SchemeKind, SigmaMode, TruncationRule};
pub use fractional::{FractionalObjective, OptimizerConfig, OptimizerReport, SearchPath};
pub use gproc::{GpConfig, GpKernel, SupSimResult};
pub use harness::{CellReport, StudyConfig, TruncationMode};
pub use testing::{ConstantRule, Schedule, ScheduleSpec, TestResult, TestSpec};

pub use nalgebra;
