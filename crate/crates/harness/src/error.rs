use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] onerec::Error),

    #[error("bad configuration: {0}")]
    Config(String),

    #[error("stage {stage} needs {missing}, which has not completed in this run")]
    MissingStage { stage: String, missing: String },

    #[error("stage {stage}: upstream {upstream} was produced from a different configuration")]
    ConfigMismatch { stage: String, upstream: String },

    #[error("{0} already exists; run directories are never overwritten")]
    DirExists(PathBuf),

    #[error("metric {metric:?} is absent in {dir}")]
    MissingMetric { metric: String, dir: PathBuf },

    #[error("no completed evaluation found under {0}")]
    Incomplete(PathBuf),

    #[error("{failed} of {total} sweep points failed")]
    SweepFailed { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// What a failing command prints on stderr and leaves in a failure marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub error: String,
    pub message: String,
    pub exit_code: i32,
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(_) => "core",
            Self::Config(_) | Self::Toml(_) => "config",
            Self::MissingStage { .. } => "missing_stage",
            Self::ConfigMismatch { .. } => "config_mismatch",
            Self::DirExists(_) => "dir_exists",
            Self::MissingMetric { .. } => "missing_metric",
            Self::Incomplete(_) => "incomplete",
            Self::SweepFailed { .. } => "sweep_failed",
            Self::Io(_) => "io",
            Self::Json(_) | Self::Csv(_) => "format",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Toml(_) => 2,
            Self::MissingStage { .. } | Self::ConfigMismatch { .. } | Self::Incomplete(_) => 3,
            Self::DirExists(_) => 4,
            Self::MissingMetric { .. } => 5,
            Self::SweepFailed { .. } => 6,
            _ => 1,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            error: self.kind().to_string(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}
