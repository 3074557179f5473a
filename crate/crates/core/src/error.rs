use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum MvkError {
    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("drift produced a non-finite value at step {step}, coordinate {coordinate}")]
    DriftDiverged { step: usize, coordinate: usize },

    #[error("observation map undefined: coordinate {coordinate} is zero under exponent {exponent}")]
    SingularMap { coordinate: usize, exponent: i32 },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("covariance of point {point} in view {view} is not positive definite")]
    SingularCovariance { point: usize, view: usize },

    #[error("pair ({0}, {1}) has no valid view")]
    NoValidView(usize, usize),

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("eigensolver failure: {0}")]
    SpectralFailure(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("eigenvalue {index} is not positive ({value})")]
    NonPositiveEigenvalue { index: usize, value: f64 },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("operation requires ground-truth intrinsic parameters")]
    MissingGroundTruth,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MvkError>;

impl MvkError {
    /// True for failures of the numerical pipeline, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MvkError::DriftDiverged { .. }
                | MvkError::SingularMap { .. }
                | MvkError::InsufficientSamples { .. }
                | MvkError::SingularCovariance { .. }
                | MvkError::NoValidView(..)
                | MvkError::DegenerateDataset(_)
                | MvkError::SpectralFailure(_)
                | MvkError::DegenerateSpectrum(_)
                | MvkError::NonPositiveEigenvalue { .. }
                | MvkError::DegenerateFit(_)
        )
    }

    /// True for filesystem and serialization failures.
    pub fn is_io(&self) -> bool {
        matches!(self, MvkError::Io(_) | MvkError::Csv(_) | MvkError::Json(_))
    }
}
