use thiserror::Error;

#[derive(Debug, Error)]
pub enum M3Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds the model maximum of {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("run `{0}` already completed; pass --force to run it again")]
    RunExists(String),

    #[error("run error in stage `{stage}`: {message}")]
    Stage { stage: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl M3Error {
    /// True for errors caused by bad user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            M3Error::Dimension(_)
                | M3Error::InvalidArgument(_)
                | M3Error::Format(_)
                | M3Error::Config(_)
                | M3Error::RunExists(_)
                | M3Error::Json(_)
                | M3Error::Csv(_)
        )
    }
}

pub type Result<T, E = M3Error> = std::result::Result<T, E>;
