//! Exit-code classification.

use std::fmt;
use std::path::Path;

use canids::canio::CanioError;
use canids::detect::DetectError;
use canids::model::ModelError;
use canids::training::TrainError;
use canids::windowing::WindowError;

pub const USAGE: u8 = 2;
pub const TRAINING: u8 = 3;
pub const ARTIFACT: u8 = 4;

/// An error plus the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: USAGE,
        error: error.into(),
    }
}

pub fn artifact(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: ARTIFACT,
        error: error.into(),
    }
}

pub fn require_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(anyhow::anyhow!("{} does not exist", path.display())))
    }
}

impl From<CanioError> for Failure {
    fn from(e: CanioError) -> Self {
        usage(e)
    }
}

impl From<WindowError> for Failure {
    fn from(e: WindowError) -> Self {
        match e {
            WindowError::Shard(_) | WindowError::Vocab(_) | WindowError::Json(_) => artifact(e),
            _ => usage(e),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(_) | ModelError::Json(_) | ModelError::Length { .. } => artifact(e),
            ModelError::TokenOutOfRange { .. } => artifact(e),
            _ => usage(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Failure {
                code: TRAINING,
                error: e.into(),
            },
            TrainError::Model(m) => m.into(),
            _ => usage(e),
        }
    }
}

impl From<DetectError> for Failure {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::VocabMismatch { .. } | DetectError::WindowLength { .. } => artifact(e),
            DetectError::Model(m) => m.into(),
            _ => usage(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        usage(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        usage(e)
    }
}

impl From<canids::traffic_sim::SimError> for Failure {
    fn from(e: canids::traffic_sim::SimError) -> Self {
        usage(e)
    }
}
