use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),

    #[error("bad magic: expected \"GFT1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated payload: header needs {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("row count mismatch: {what}")]
    RowCountMismatch { what: String },

    #[error("unknown class label {label:?} on row {row}")]
    UnknownClassLabel { row: usize, label: String },

    #[error("malformed csv (line {line}): {message}")]
    MalformedCsv { line: usize, message: String },

    #[error("dataset has no domain labels")]
    MissingDomainLabels,

    #[error("held-out domain {0} has no samples")]
    EmptySplit(usize),

    #[error("too few samples: n = {n} < k = {k}")]
    TooFewSamples { n: usize, k: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cluster {0} has no members")]
    EmptyCluster(usize),

    #[error("all pairwise support distances are zero")]
    DegenerateSupports,

    #[error("kernel system is singular (duplicate supports with zero ridge?)")]
    SingularKernel,

    #[error("width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: String, actual: String },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("loss diverged at step {0}")]
    DivergedLoss(usize),

    #[error("malformed container: {0}")]
    MalformedContainer(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt { path: path.into(), source }
    }

    /// True for failures of the numerics rather than of the inputs or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularKernel | Error::DivergedLoss(_) | Error::DegenerateSupports
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::IoAt { .. })
    }
}
