//! Crate-wide error type and the process exit codes it maps to.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value handed to an operation violates its preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The run configuration is inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// A checkpoint file is malformed (bad magic, truncation, shape mismatch).
    #[error("checkpoint format error in {path}: {detail}")]
    CheckpointFormat { path: PathBuf, detail: String },

    /// A CSV data file failed to parse.
    #[error("{path}:{line}: {detail}")]
    CsvParse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 configuration, 2 divergence, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Diverged { .. } => 2,
            Error::CheckpointFormat { .. } | Error::CsvParse { .. } | Error::Io { .. } => 3,
        }
    }
}
