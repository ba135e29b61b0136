use std::path::PathBuf;

/// Error type shared by every public operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration file or configuration invariant violation.
    #[error("config: {0}")]
    Config(String),

    /// Malformed manifest, missing label, unknown class name, bad image.
    #[error("data: {0}")]
    Data(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// A public op was handed tensors with incompatible shapes.
    #[error("shape: {0}")]
    Shape(String),

    /// Non-finite values, degenerate inputs to statistics, failed training.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Missing tensors, fingerprint mismatch, malformed checkpoint layout.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for the CLI: 2 for data-shaped problems,
    /// 3 for numeric failures (usage errors are handled by the parser).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
