use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown configuration keys in {file}: {}", keys.join(", "))]
    UnknownKeys { file: String, keys: Vec<String> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path} is locked by another run (remove {path}/.lock if that run is gone)")]
    Locked { path: String },
    #[error("missing input {0}")]
    Missing(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] ddt_core::Error),
    #[error("toml error in {file}: {message}")]
    Toml { file: String, message: String },
    #[error("{run} stopped at step {step}; rerun the same command to resume")]
    Stopped { run: String, step: usize },
    #[error("plot error: {0}")]
    Plot(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::UnknownKeys { .. } => "unknown_keys",
            HarnessError::Config(_) => "config",
            HarnessError::Locked { .. } => "locked",
            HarnessError::Missing(_) => "missing_input",
            HarnessError::Io { .. } => "io",
            HarnessError::Core(ddt_core::Error::NonFinite { .. }) => "non_finite",
            HarnessError::Core(ddt_core::Error::Config(_)) => "config",
            HarnessError::Core(_) => "core",
            HarnessError::Toml { .. } => "toml",
            HarnessError::Stopped { .. } => "stopped",
            HarnessError::Plot(_) => "plot",
            HarnessError::Json(_) => "json",
        }
    }

    /// Machine-readable form written on failure.
    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            unknown_keys: match self {
                HarnessError::UnknownKeys { keys, .. } => keys.clone(),
                _ => Vec::new(),
            },
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub unknown_keys: Vec<String>,
}
