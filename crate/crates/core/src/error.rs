use thiserror::Error;

use crate::network::TrainTrajectory;

/// Errors produced by the score-estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged at iteration {iter}")]
    Divergence {
        iter: usize,
        trajectory: Box<TrainTrajectory>,
    },

    #[error("ill-conditioned system (lambda_min = {lambda_min:e}): {msg}")]
    Conditioning { lambda_min: f64, msg: String },

    #[error("stopping rule: {0}")]
    StoppingRule(String),

    #[error("sampler blew up at step {step}")]
    BlowUp { step: usize },

    #[error("inconsistent components: {0}")]
    Consistency(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for configuration errors, including ones raised inside a stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
