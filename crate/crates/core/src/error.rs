use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("non-monotone splice at index {index}: {prev} -> {next}")]
    NonMonotoneSplice { index: usize, prev: f64, next: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate schedule at t={t}: alpha_bar={alpha_bar}")]
    DegenerateSchedule { t: f64, alpha_bar: f64 },

    #[error("step ordering violated: {from} -> {to}")]
    Ordering { from: f64, to: f64 },

    #[error("plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("step {step} did not converge (residual {residual:e})")]
    NonConvergence { step: usize, residual: f64 },

    #[error("fused attention row {row} sums to {sum:e}")]
    ZeroRow { row: usize, sum: f64 },

    #[error("zero vector")]
    ZeroVector,

    #[error("token index {index} out of range for {len} tokens")]
    TokenOutOfRange { index: usize, len: usize },

    #[error("token {0} appears in both token sets")]
    OverlappingTokens(usize),

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    #[error("empty series")]
    EmptySeries,

    #[error("{key}: {message}")]
    Config { key: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
