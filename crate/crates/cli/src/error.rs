//! Command failures and their machine-readable rendering.

use serde::Serialize;

use trio_core::clip::ClipError;
use trio_core::dataset::DatasetError;
use trio_core::diffusion::DiffusionError;
use trio_core::trainer::TrainError;
use trio_core::{EncoderError, MetricsError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Clip(#[from] ClipError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("server failure: {0}")]
    Server(String),
}

impl CliError {
    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Stable identifier of the failing layer.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Dataset(_) => "dataset",
            CliError::Clip(_) => "clip_targets",
            CliError::Encoder(_) => "encoder",
            CliError::Train(_) => "trainer",
            CliError::Metrics(_) => "metrics",
            CliError::Diffusion(_) => "diffusion",
            CliError::Io { .. } => "io",
            CliError::Server(_) => "server",
        }
    }

    /// Process exit code: 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: ErrorBody {
                kind: self.kind().to_string(),
                message: self.to_string(),
            },
        }
    }
}

/// The JSON object written to stderr on failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorReport {
    pub error: ErrorBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;
