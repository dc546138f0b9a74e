use thiserror::Error;

use crate::registration::Placement;

/// Errors produced anywhere in the layout pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape exceeds the unit cube: {0}")]
    OutOfBounds(String),

    #[error("resolution mismatch: {0} vs {1}")]
    ResolutionMismatch(usize, usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("degenerate correspondence set: {0}")]
    Degenerate(String),

    #[error("registration diverged: best rms {:.4} exceeds region diameter", best.rms_error)]
    Diverged { best: Box<Placement> },

    #[error("unknown object class `{0}`")]
    UnknownClass(String),

    #[error("rejection budget exhausted after {0} attempts")]
    RejectionBudget(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("format: {0}")]
    Format(String),

    #[error("step {index}: {source}")]
    Step { index: usize, source: Box<Error> },

    #[error("rollout aborted after {} placements: {source}", partial.len())]
    Rollout {
        partial: Vec<Placement>,
        source: Box<Error>,
    },

    #[error("scene {id}: {source}")]
    Scene { id: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Wraps an error with the index of the generation step that produced it.
    pub fn at_step(self, index: usize) -> Self {
        Error::Step {
            index,
            source: Box::new(self),
        }
    }

    pub fn in_scene(self, id: &str) -> Self {
        Error::Scene {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a numerical failure (NaN/inf).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::Step { source, .. } | Error::Rollout { source, .. } | Error::Scene { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            return 4;
        }
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Step { source, .. } | Error::Rollout { source, .. } | Error::Scene { source, .. } => {
                source.exit_code()
            }
            Error::Diverged { .. } | Error::Degenerate(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
