use thiserror::Error;

pub type Result<T> = std::result::Result<T, HilError>;

#[derive(Debug, Error)]
pub enum HilError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Every latent configuration assigns probability zero to the observed
    /// action at step `t` (1-based).
    #[error("degenerate trajectory: all latent paths have probability zero at step {t}")]
    DegenerateTrajectory { t: usize },

    /// Online counterpart of [`HilError::DegenerateTrajectory`]; `t` is the
    /// 1-based sample count at which the filter normalizer vanished.
    #[error("degenerate sample: observed action has probability zero under every option at t = {t}")]
    DegenerateSample { t: usize },

    #[error("online statistic is empty (no samples processed)")]
    EmptyStatistic,

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HilError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        HilError::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        HilError::Dimension(msg.into())
    }
}
