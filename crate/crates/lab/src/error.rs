use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VERIFICATION: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const NUMERIC: u8 = 3;
}

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("csv {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] pvlu_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        LabError::Config(message.into())
    }

    /// Numeric aborts map to 3, everything else to 2.
    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Core(pvlu_core::Error::Numeric(_)) => exit::NUMERIC,
            _ => exit::USAGE,
        }
    }
}

pub type LabResult<T> = Result<T, LabError>;

/// Attaches a file path to a core error raised while decoding that file.
pub(crate) fn in_file(path: &std::path::Path, e: pvlu_core::Error) -> LabError {
    match e {
        e @ pvlu_core::Error::Format { .. } => LabError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
        other => LabError::Core(other),
    }
}
