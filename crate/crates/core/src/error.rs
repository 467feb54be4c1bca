use thiserror::Error;

use crate::splines::SplineError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Spline(#[from] SplineError),

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("linear system is not positive definite even after ridge {ridge:e}: {context}")]
    SingularSystem { context: String, ridge: f64 },

    #[error("REML criterion is not finite at log-lambda {log_lambda}")]
    NonFiniteCriterion { log_lambda: f64 },

    #[error("all bandwidth candidates are degenerate (zero weight sums)")]
    DegenerateBandwidths,

    #[error("requested {requested} components but numerical rank is {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
