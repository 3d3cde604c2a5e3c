use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A freezing or optimizer contract was violated. Maps to exit code 2.
    #[error("contract breach: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: bad magic header")]
    BadMagic,

    #[error("checkpoint: format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: file truncated or corrupt ({0})")]
    Truncated(String),

    #[error("checkpoint: config hash {found:016x} does not match model config {expected:016x}")]
    ConfigHashMismatch { found: u64, expected: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error when surfaced by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) => 2,
            _ => 1,
        }
    }
}
