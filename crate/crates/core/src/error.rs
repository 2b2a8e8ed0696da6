use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UapError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown layer `{name}`; available layers: {}", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("classifier `{0}` does not expose input gradients")]
    NoInputGradient(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid UAPF container: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cannot rescale a zero perturbation")]
    ZeroPerturbation,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = UapError> = std::result::Result<T, E>;

impl UapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        UapError::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
