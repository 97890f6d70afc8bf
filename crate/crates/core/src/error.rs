use thiserror::Error;

/// Errors produced by the engine, planner and file surfaces.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("context overflow: {needed} tokens exceed the model limit of {limit}")]
    ContextOverflow { needed: usize, limit: usize },

    #[error("missing profile entry for bucket {bucket}, class {class}")]
    MissingProfileEntry { bucket: String, class: String },

    #[error("layer coverage mismatch: expected {expected} layers, got {got}")]
    LayerCoverage { expected: usize, got: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Short machine-readable tag used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::MissingProfileEntry { .. } => "missing_profile_entry",
            Error::LayerCoverage { .. } => "layer_coverage",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
