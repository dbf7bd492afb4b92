use thiserror::Error;

/// Errors raised by the estimators, the inference routines and the file readers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("design matrix is rank deficient (condition ratio {ratio:.3e} below 1e-10)")]
    SingularDesign { ratio: f64 },

    #[error("subset of {size} rows is too small for {dim} coefficients")]
    EmptySubset { size: usize, dim: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("optimality check requires a soft-penalty fit")]
    WrongPenaltyKind,

    #[error("sample Gram matrix is not invertible")]
    SingularGram,

    #[error("linear map does not have full row rank")]
    RankDeficientMap,

    #[error("degenerate lambda interval: lower {low} >= upper {high}")]
    DegenerateInterval { low: f64, high: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
