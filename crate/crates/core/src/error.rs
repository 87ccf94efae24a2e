use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a failure originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Eigensolve,
    Schedule,
    Truncation,
    ReduceNull,
    Fit,
    Statistic,
    NullSimulation,
    Quantile,
    Baselines,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Eigensolve => "eigensolve",
            Stage::Schedule => "schedule",
            Stage::Truncation => "truncation",
            Stage::ReduceNull => "reduce_null",
            Stage::Fit => "fit",
            Stage::Statistic => "statistic",
            Stage::NullSimulation => "null_simulation",
            Stage::Quantile => "quantile",
            Stage::Baselines => "baselines",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch")]
    GridMismatch,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("signal variance is zero")]
    ZeroSignal,
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("truncation empty: c_n = {c_n} exceeds lambda_p + delta_p/2 for every p")]
    TruncationEmpty { c_n: f64 },
    #[error("no spectral weight is active at threshold c_n = {c_n}")]
    NoActiveWeights { c_n: f64 },
    #[error("gradient undefined at origin")]
    GradientAtOrigin,
    #[error("noise scale is zero")]
    ZeroSigma,
    #[error("kernel not PSD (smallest eigenvalue {min_eigenvalue:e})")]
    KernelNotPsd { min_eigenvalue: f64 },
    #[error("schedule undefined for n = {0} (requires n >= 16)")]
    ScheduleUndefined(usize),
    #[error("empty sample set")]
    EmptySamples,
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Stage label when the error was raised inside the test pipeline.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
