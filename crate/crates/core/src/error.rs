use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("autodiff error: {0}")]
    Graph(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("wav error in {path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("feature file {path}: {kind}")]
    FeatureFile { path: PathBuf, kind: FeatureFileError },

    #[error("manifest {path}, line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureFileError {
    #[error("bad magic {0:?}, expected \"MFH1\"")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("zero rows")]
    ZeroRows,
    #[error("zero columns")]
    ZeroCols,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"MFC1\"")]
    BadMagic([u8; 4]),
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("duplicate entry {0:?}")]
    Duplicate(String),
    #[error("missing parameter {0:?}")]
    MissingParameter(String),
    #[error("unexpected entry {0:?}")]
    UnexpectedEntry(String),
    #[error("shape mismatch for {name:?}: checkpoint has {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("bad config entry {0}")]
    BadConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by NaN/Inf values during computation.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
