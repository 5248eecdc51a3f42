use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// The q-exponential density is singular where `r = 0` and `q < 2`.
    #[error("degenerate point: {0}")]
    DegeneratePoint(String),

    /// The whitening Jacobian is undefined at `ζ = 0` when `q < 2`.
    #[error("whitening map is singular at the origin")]
    Singularity,

    #[error("covariance factorization failed with nugget up to {max_nugget:e}")]
    NumericalRank { max_nugget: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}
