use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ground truth has zero Frobenius norm")]
    ZeroNormTruth,

    #[error("algorithmic scale tau = {tau:e} underflows (sigma = {sigma:e})")]
    TauUnderflow { tau: f64, sigma: f64 },

    #[error("non-finite value while evaluating objective at candidate {candidate:?}")]
    NonFinite { candidate: Vec<f64> },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
