use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] patchgrid_core::Error),
    #[error(transparent)]
    Nn(#[from] patchgrid_nn::NnError),
    #[error("data: {0}")]
    Data(String),
    #[error("taxonomy mismatch: model is {model}, data is {data}")]
    TaxonomyMismatch { model: String, data: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Training or embedding produced NaN or infinity.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// True for failures caused by the input data rather than the numerics
    /// or the configuration.
    pub fn is_data_error(&self) -> bool {
        match self {
            Self::Core(e) => !matches!(e, patchgrid_core::Error::Invalid(_)),
            Self::Nn(patchgrid_nn::NnError::Spec(_)) => false,
            Self::Nn(_) | Self::Data(_) | Self::TaxonomyMismatch { .. } | Self::Io { .. } | Self::Json(_) => true,
            Self::Config(_) | Self::Numeric(_) => false,
        }
    }
}
