use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants are grouped by who is at fault: configuration problems are
/// the caller's, backend and dependency problems are the environment's.
#[derive(Debug, Error)]
pub enum MftfError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("scorer dependency error: {0}")]
    Dependency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MftfError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn backend(msg: impl Into<String>) -> Self {
        Self::Backend(msg.into())
    }

    /// True for errors caused by invalid user input rather than the runtime.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Index(_) | Self::NotFound(_) | Self::Shape(_) | Self::Json(_)
        )
    }
}

pub type Result<T, E = MftfError> = std::result::Result<T, E>;
