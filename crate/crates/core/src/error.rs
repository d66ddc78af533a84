use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, too small to normalize")]
    ZeroRow { row: usize, norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid embedding set: {0}")]
    InvalidEmbeddings(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("invalid similarity matrix: {0}")]
    InvalidSimilarity(String),

    #[error("anchor matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularAnchors { condition: f64 },

    #[error("invalid anchor selection: {0}")]
    InvalidAnchors(String),

    #[error("numerical rank {found} is below the requested rank {requested}")]
    RankDeficient { requested: usize, found: usize },

    #[error("numerical rank {found} exceeds the requested rank {requested}")]
    RankExcess { requested: usize, found: usize },

    #[error("unit-diagonal system is infeasible: {0}")]
    InfeasibleDiagonal(String),

    #[error("need at least 2 rows to fit principal axes, got {0}")]
    TooFewRows(usize),

    #[error("invalid projector: {0}")]
    InvalidProjector(String),

    #[error("insufficient class data: {0}")]
    InsufficientClassData(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("pooled covariance is singular")]
    SingularCovariance,

    #[error("no query has a relevant gallery item")]
    NoRelevant,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bad header in {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("payload of {path} has {actual} bytes, expected {expected}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("payload of {path} has {actual} bytes, expected {expected}")]
    TrailingPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at row {row}, column {col} in {path}")]
    NonFiniteValue { path: PathBuf, row: usize, col: usize },

    #[error("{path} claims normalized rows but row {row} has norm {norm}")]
    NotNormalized { path: PathBuf, row: usize, norm: f64 },

    #[error("label file is missing index {0}")]
    MissingIndex(usize),

    #[error("label file repeats index {0}")]
    DuplicateIndex(usize),

    #[error("malformed label file: {0}")]
    BadLabels(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroRow { .. } => "ZeroRow",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidEmbeddings(_) => "InvalidEmbeddings",
            Error::InvalidLabels(_) => "InvalidLabels",
            Error::InvalidSimilarity(_) => "InvalidSimilarity",
            Error::SingularAnchors { .. } => "SingularAnchors",
            Error::InvalidAnchors(_) => "InvalidAnchors",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::RankExcess { .. } => "RankExcess",
            Error::InfeasibleDiagonal(_) => "InfeasibleDiagonal",
            Error::TooFewRows(_) => "TooFewRows",
            Error::InvalidProjector(_) => "InvalidProjector",
            Error::InsufficientClassData(_) => "InsufficientClassData",
            Error::EmptyClass(_) => "EmptyClass",
            Error::SingularCovariance => "SingularCovariance",
            Error::NoRelevant => "NoRelevant",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::BadHeader { .. } => "BadHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::TrailingPayload { .. } => "TrailingPayload",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::NotNormalized { .. } => "NotNormalized",
            Error::MissingIndex(_) => "MissingIndex",
            Error::DuplicateIndex(_) => "DuplicateIndex",
            Error::BadLabels(_) => "BadLabels",
            Error::Io { .. } => "Io",
            Error::Serialization(_) => "Serialization",
        }
    }

    /// Process exit status for the CLI. Grouped by category so scripts can
    /// branch without parsing messages.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadHeader { .. }
            | Error::TruncatedPayload { .. }
            | Error::TrailingPayload { .. }
            | Error::NonFiniteValue { .. }
            | Error::NotNormalized { .. }
            | Error::MissingIndex(_)
            | Error::DuplicateIndex(_)
            | Error::BadLabels(_)
            | Error::Io { .. }
            | Error::Serialization(_) => 3,
            Error::SingularAnchors { .. }
            | Error::RankDeficient { .. }
            | Error::RankExcess { .. }
            | Error::InfeasibleDiagonal(_)
            | Error::SingularCovariance
            | Error::ZeroRow { .. } => 4,
            Error::InsufficientClassData(_) | Error::EmptyClass(_) | Error::NoRelevant => 5,
            _ => 6,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
