use std::path::PathBuf;

/// Errors produced anywhere in the search, decode and analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("plan does not match backbone: {0}")]
    PlanMismatch(String),

    #[error("invalid field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("step {step} outside schedule 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Schema { .. }
                | Error::PlanMismatch(_)
                | Error::Json(_)
                | Error::MissingArtifact(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
