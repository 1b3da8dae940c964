use std::path::PathBuf;

/// Errors raised by the correspondence engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("image too small: {height}x{width}, need min side >= {min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("descriptor map is not L2-normalized")]
    NotNormalized,

    #[error("cost volume needs {needed} bytes, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },

    #[error("empty sample set")]
    EmptySamples,

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("backward called on a graph with no recorded forward pass")]
    NoForward,

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parse errors for the binary and text file formats.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated payload at offset {offset}: expected {expected} bytes, got {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: usize },

    #[error("malformed header at offset {offset}: {message}")]
    Malformed { offset: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
