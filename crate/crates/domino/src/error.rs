use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or input widths do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity escaped a numerical routine.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Bad configuration: unknown keys, unparsable values, inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A required artifact (usually a checkpoint) does not exist yet.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// The replay buffer cannot serve the request yet.
    #[error("not ready: {0}")]
    NotReady(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed checkpoint or CSV input.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
