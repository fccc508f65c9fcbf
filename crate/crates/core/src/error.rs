use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate site: locations {0} and {1} coincide")]
    DuplicateSite(usize, usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("mode search did not converge: {0}")]
    ModeSearch(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ingest error at row {row}, column '{column}': {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn rank(msg: impl Into<String>) -> Self {
        Error::Rank(msg.into())
    }
}
