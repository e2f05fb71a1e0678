use thiserror::Error;

/// Errors raised by the numerical kernels, losses, statistics and harness.
///
/// The `Display` form of every variant starts with a stable kebab-case tag
/// (`shape-mismatch`, `invalid-temperature`, ...) so callers and logs can
/// match on it without depending on the detail text.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty-vector")]
    EmptyVector,
    #[error("invalid-temperature: {0}")]
    InvalidTemperature(f64),
    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not-positive-semidefinite: factorization failed after maximum jitter")]
    NotPsd,
    #[error("missing-class-stats: class {class} (store has {available} classes)")]
    MissingClassStats { class: usize, available: usize },
    #[error("empty-supervision: every pixel is ignored")]
    EmptySupervision,
    #[error("invalid-step: {step} outside [0, {total}]")]
    InvalidStep { step: usize, total: usize },
    #[error("unknown-class: {class} >= {num_classes}")]
    UnknownClass { class: usize, num_classes: usize },
    #[error("no-forward-state: backward called before forward")]
    NoForwardState,
    #[error("schedule-exhausted: step {step} >= max_iter {max_iter}")]
    ScheduleExhausted { step: usize, max_iter: usize },
    #[error("invalid-task-spec: {0}")]
    InvalidTaskSpec(String),
    #[error("training-diverged: non-finite loss at step {0}")]
    TrainingDiverged(usize),
    #[error("invalid-config: {path}: {message}")]
    InvalidConfig { path: String, message: String },
    #[error("inconsistent-results: {0}")]
    InconsistentResults(String),
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
    #[error("parse-error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
