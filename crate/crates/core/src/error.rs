use thiserror::Error;

pub type Result<T> = std::result::Result<T, GamError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GamError {
    #[error("too few observations: {n} supplied, at least {required} needed")]
    TooFewObservations { n: usize, required: usize },

    #[error("covariate is constant (all values equal {value})")]
    DegenerateCovariate { value: f64 },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid data at row {row}: {message}")]
    InvalidData { row: usize, message: String },

    #[error("operation requires the {expected} family, got {actual}")]
    FamilyMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("linear predictor overflow at observation {index} (value {value:e})")]
    Overflow { index: usize, value: f64 },

    #[error("singular {what} (condition number {condition:e})")]
    Singular { what: &'static str, condition: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("interval bounds crossed at index {index}: lower {lower} > upper {upper}")]
    CrossedBounds { index: usize, lower: f64, upper: f64 },
}
