use std::path::PathBuf;

use thiserror::Error;

use crate::gdsrq::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "no connected geometric graph with n = {n}, radius = {radius} after {attempts} attempts"
    )]
    GraphGeneration {
        n: usize,
        radius: f64,
        attempts: u32,
    },

    #[error("graph is not connected")]
    Disconnected,

    #[error("non-finite value {value} at {context}")]
    NonFinite { value: f64, context: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("schedule rejected:\n{0}")]
    ScheduleRejected(Box<ValidationReport>),

    #[error(
        "lambda_beta = {0} outside the range (1/2, 3/5] required for the optimal step exponent"
    )]
    LambdaBetaOutOfRange(f64),

    #[error(
        "reference solver did not converge: residual {residual:e} after {iterations} iterations"
    )]
    NoConvergence { residual: f64, iterations: u64 },

    #[error("reference solutions disagree: |f1 - f2| = {diff:e} > {bound:e}")]
    ReferenceMismatch { diff: f64, bound: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
