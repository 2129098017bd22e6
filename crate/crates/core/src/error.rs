use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum DfaError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no valid ground-truth pixels")]
    EmptyValidMask,

    #[error("training failed to reach target {target} within {epochs} epochs (final error {achieved})")]
    TrainingFailed {
        target: f64,
        achieved: f64,
        epochs: usize,
    },

    #[error("unsupported architecture id {0:?}")]
    UnsupportedArchitecture(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing artifact for source model {0:?}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, DfaError>;

impl DfaError {
    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        DfaError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
