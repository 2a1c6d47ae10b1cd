use std::path::PathBuf;

/// Error type shared across the crate. The CLI maps variants onto exit
/// codes: config problems exit 2, numeric failures 3, I/O failures 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward pass produced NaN or Inf. Reports the first offending node.
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    /// Numeric failure outside the tape (bad gradients, diverged runs).
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI (0 = success is handled by the caller).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Corpus(_) => 2,
            Error::NonFinite { .. } | Error::NumericFailure(_) => 3,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
