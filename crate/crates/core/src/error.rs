use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("quadrature order {0} out of range 1..=64")]
    QuadratureOrder(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),

    #[error("index {index} out of range for {len} examples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The natural-gradient update drove a precision to a nonpositive value.
    #[error("precision violation at coordinate {coordinate}: updated precision {value}")]
    PrecisionViolation { coordinate: usize, value: f64 },

    #[error("back-tracking found no positive step size (coordinate {coordinate} blocks)")]
    StalledStep { coordinate: usize },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("enumeration bound exceeded: N = {n} > {max}")]
    EnumerationBound { n: usize, max: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::PrecisionViolation { .. } | Error::StalledStep { .. }
        )
    }
}
