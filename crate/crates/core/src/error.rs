use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are grouped so the CLI can map them onto exit codes: contract
/// and configuration problems are usage errors, data problems are data
/// errors, and the remaining ones are numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dimension {0} exceeds the supported maximum of {max}", max = crate::moments::MAX_DIM)]
    DimensionTooLarge(usize),

    #[error("odd number of slots ({0}) cannot be perfectly paired")]
    OddSlotCount(usize),

    #[error("moment degree {degree} exceeds the exact-evaluation cap {cap}")]
    DegreeAboveCap { degree: u32, cap: u32 },

    #[error("multinomial power {power} exceeds the cap {cap}")]
    PowerAboveCap { power: u32, cap: u32 },

    #[error("invalid covariance matrix: {0}")]
    InvalidCovariance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing-target: column `{0}` not found in header")]
    MissingTarget(String),

    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("noise blocks do not match the layout: {0}")]
    BlockMismatch(String),

    #[error("indefinite-approximation: covariance not positive definite after maximum jitter")]
    IndefiniteApproximation,

    #[error("calibration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("all chains stuck: {0}")]
    ChainsStuck(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Broad category of an [`Error`], used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DimensionMismatch { .. }
            | Error::DimensionTooLarge(_)
            | Error::OddSlotCount(_)
            | Error::DegreeAboveCap { .. }
            | Error::PowerAboveCap { .. }
            | Error::InvalidArgument(_)
            | Error::Unsupported(_)
            | Error::BlockMismatch(_) => ErrorKind::Usage,
            Error::EmptyDataset
            | Error::MissingTarget(_)
            | Error::NonNumeric { .. }
            | Error::InvalidData(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::InvalidCovariance(_)
            | Error::IndefiniteApproximation
            | Error::NoConvergence(_)
            | Error::ChainsStuck(_) => ErrorKind::Numerical,
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Wraps the error with the pipeline stage it came from.
    pub fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
