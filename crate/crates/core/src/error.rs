use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Every variant belongs to one of four [`ErrorKind`] categories, which the
/// command-line front end maps to process exit statuses.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("expected {expected} keypoints, got {actual}")]
    KeypointCount { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate spine: {0}")]
    DegenerateSpine(&'static str),

    #[error("degenerate frame: vertical extent {extent} below {minimum}")]
    DegenerateFrame { extent: f64, minimum: f64 },

    #[error("sequence {0} has no usable frames")]
    EmptySequence(String),

    #[error("shape mismatch for {name}: expected {expected:?}, got {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("not implemented: {0}")]
    NotImplemented(&'static str),
}

/// Coarse error category used for exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorKind::Data,
            Error::Io { .. } => ErrorKind::Io,
            Error::Config(_) | Error::NotImplemented(_) => ErrorKind::Config,
            Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Malformed { .. }
            | Error::KeypointCount { .. }
            | Error::DegenerateSpine(_)
            | Error::DegenerateFrame { .. }
            | Error::EmptySequence(_)
            | Error::Shape { .. }
            | Error::Partition(_)
            | Error::Protocol(_)
            | Error::Invalid(_)
            | Error::Checkpoint(_) => ErrorKind::Data,
        }
    }

    /// Process exit status: 1 I/O, 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Io => 1,
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
