use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor ops, model configuration, file formats and training.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Shape data does not match the declared element count.
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    /// Two operands have incompatible shapes for the requested op.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An op received a tensor of the wrong rank or dimension.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    /// A configuration value is out of its legal range.
    Config { what: String },
    /// A sequence exceeds the configured maximum length.
    SequenceTooLong { len: usize, max: usize },
    /// A video with zero frames cannot be encoded.
    EmptyVideo,
    /// Ranking was requested over an empty corpus.
    EmptyCorpus,
    /// A dataset with no pairs cannot be trained on.
    EmptyDataset,
    /// A checked op produced or consumed a non-finite value.
    NonFinite { op: &'static str },
    /// Contract violation inside a numeric kernel.
    Numeric { what: String },
    /// Binary feature/checkpoint file failed to parse.
    Format {
        path: String,
        offset: u64,
        what: String,
    },
    /// Manifest or config text failed validation.
    Parse {
        path: String,
        line: usize,
        what: String,
    },
    /// A checkpoint tensor is missing or does not match the constructed model.
    Checkpoint { tensor: String, what: String },
    /// Underlying I/O failure.
    Io { path: String, what: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeData {
                shape,
                expected,
                got,
            } => {
                write!(
                    f,
                    "shape {:?} implies {} elements, data has {}",
                    shape, expected, got
                )
            }
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{}: incompatible shapes {:?} and {:?}", op, left, right)
            }
            Error::BadShape {
                op,
                shape,
                expected,
            } => {
                write!(f, "{}: got shape {:?}, expected {}", op, shape, expected)
            }
            Error::Config { what } => write!(f, "configuration error: {}", what),
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {} exceeds maximum {}", len, max)
            }
            Error::EmptyVideo => write!(f, "video has no frames"),
            Error::EmptyCorpus => write!(f, "corpus is empty"),
            Error::EmptyDataset => write!(f, "dataset is empty"),
            Error::NonFinite { op } => write!(f, "{}: non-finite value detected", op),
            Error::Numeric { what } => write!(f, "numeric contract violation: {}", what),
            Error::Format { path, offset, what } => {
                write!(f, "{}: at byte {}: {}", path, offset, what)
            }
            Error::Parse { path, line, what } => write!(f, "{}:{}: {}", path, line, what),
            Error::Checkpoint { tensor, what } => {
                write!(f, "checkpoint tensor '{}': {}", tensor, what)
            }
            Error::Io { path, what } => write!(f, "{}: {}", path, what),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub(crate) fn io(path: impl Into<String>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            what: err.to_string(),
        }
    }
}
