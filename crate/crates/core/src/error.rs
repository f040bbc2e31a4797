use std::path::PathBuf;

/// Errors raised anywhere in the replanning toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("velocity {v} below floor")]
    DegenerateVelocity { v: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),

    #[error("line search failed after {iterations} iterations")]
    LineSearchFailure { iterations: usize },
    #[error("non-finite cost at the starting point")]
    NonFiniteCost,
    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("non-finite entry in {0}")]
    NonFiniteEntry(&'static str),
    #[error("Hessian is singular (condition estimate {cond:e})")]
    SingularHessian { cond: f64 },

    #[error("sample dimension {0} exceeds the supported direction numbers")]
    DimensionTooLarge(usize),
    #[error("trace of the covariance must be positive, got {0}")]
    NonPositiveTrace(f64),
    #[error("no parameter passes the screening threshold")]
    EmptyImportantSet,
    #[error("{failed} of {total} screening samples failed")]
    TooManyFailedSamples { failed: usize, total: usize },

    #[error("query point outside the grid box: {0}")]
    OutOfGridBounds(String),
    #[error("interpolation cell has a missing corner (node {0})")]
    MissingCorner(usize),
    #[error("grid node {0} failed to solve")]
    NodeSolveFailure(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid file format version {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("grid file checksum mismatch")]
    ChecksumMismatch,

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable identifier, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::DegenerateVelocity { .. } => "DegenerateVelocity",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Config(_) => "ConfigError",
            Error::LineSearchFailure { .. } => "LineSearchFailure",
            Error::NonFiniteCost => "NonFiniteCost",
            Error::OptimizationFailed(_) => "OptimizationFailed",
            Error::NonFiniteEntry(_) => "NonFiniteEntry",
            Error::SingularHessian { .. } => "SingularHessian",
            Error::DimensionTooLarge(_) => "DimensionTooLarge",
            Error::NonPositiveTrace(_) => "NonPositiveTrace",
            Error::EmptyImportantSet => "EmptyImportantSet",
            Error::TooManyFailedSamples { .. } => "TooManyFailedSamples",
            Error::OutOfGridBounds(_) => "OutOfGridBounds",
            Error::MissingCorner(_) => "MissingCorner",
            Error::NodeSolveFailure(_) => "NodeSolveFailure",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::FormatVersionMismatch { .. } => "FormatVersionMismatch",
            Error::ChecksumMismatch => "ChecksumMismatch",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
