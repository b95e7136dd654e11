//! Error type shared by the laboratory crate.

use std::path::{Path, PathBuf};

use fcx_core::CoreError;

#[derive(thiserror::Error, Debug)]
pub enum LabError {
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training: {0}")]
    Training(String),
}

impl LabError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        LabError::Io { path: path.as_ref().to_path_buf(), source }
    }

    /// Exit code contract: 1 for user errors (bad input), 2 for runtime
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Format(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
