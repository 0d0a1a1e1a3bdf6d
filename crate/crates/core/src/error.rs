use thiserror::Error;

/// Errors raised by the explanation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("feature `{feature}`: {message}")]
    Validation { feature: String, message: String },

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid model spec: {0}")]
    ModelSpec(String),

    #[error("model evaluation failed: {0}")]
    Model(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("design matrix has {rows} rows but {terms} terms")]
    InsufficientRows { rows: usize, terms: usize },

    #[error("normal equations are singular even with ridge {ridge:e}")]
    Singular { ridge: f64 },

    #[error("report is internally inconsistent: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(feature: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            feature: feature.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
