use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("covariance matrix is not positive definite on grid {grid}: {detail}")]
    NotPositiveDefinite { grid: String, detail: String },

    #[error(
        "circulant embedding failed: eigenvalue {eigenvalue:e} below tolerance at index {index}; \
         use the cholesky sampler for this grid"
    )]
    CirculantEmbedding { eigenvalue: f64, index: usize },

    #[error("horizon mismatch: path horizon {path} vs model horizon {model}")]
    HorizonMismatch { path: f64, model: f64 },

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("solver failure: {message} (residual {residual:e})")]
    Solver { message: String, residual: f64 },

    #[error("consistent price system construction failed: {0}")]
    Cps(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
