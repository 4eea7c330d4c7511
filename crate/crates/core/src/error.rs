use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a documented precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate shape: no query point within the narrow band")]
    DegenerateShape,

    #[error("insufficient correspondences: {found} (need at least {needed})")]
    InsufficientCorrespondences { found: usize, needed: usize },

    #[error("rank deficient point configuration: {0}")]
    Rank(String),

    #[error("initialization failed: best hypothesis has {inliers} inliers")]
    InitializationFailure { inliers: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    #[error("optimization produced a non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("scene generation: {0}")]
    Generation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
