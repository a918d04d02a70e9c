use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:.6e})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("non-finite guidance gradient at step {step} of chain {chain}")]
    NonFiniteGuidance { chain: usize, step: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("scene generation failed for seed {seed}: {reason}")]
    SceneGeneration { seed: u64, reason: String },

    #[error("no pick grasps on target object")]
    NoPickGrasps,

    #[error("infeasible task: {0}")]
    InfeasibleTask(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
