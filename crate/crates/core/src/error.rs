use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class {class} has {available} samples, fewer than the {requested} requested")]
    ClassUnderflow {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("cannot iterate over an empty {0} pool")]
    EmptyPool(&'static str),

    #[error("unknown augmentation op `{0}`")]
    UnknownOp(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value in loss term `{0}`")]
    NonFiniteLoss(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("AUC is undefined when every sample has the same correctness label")]
    DegenerateLabels,

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid config value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
