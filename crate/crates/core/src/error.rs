use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("catalog incomplete: action `{action}` has {available} context variant(s), {requested} requested")]
    CatalogIncomplete {
        action: String,
        available: usize,
        requested: usize,
    },

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("judge `{judge_id}` unavailable for {frame_ref}: {reason}")]
    JudgeUnavailable {
        judge_id: String,
        frame_ref: String,
        reason: String,
    },

    #[error("service `{service}` violated its response contract: {reason}")]
    ServiceContract { service: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure came from a remote service rather than from the
    /// caller's inputs.
    pub fn is_external(&self) -> bool {
        matches!(
            self,
            Self::JudgeUnavailable { .. } | Self::ServiceContract { .. }
        )
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::CatalogIncomplete { .. } => "catalog_incomplete",
            Self::InvalidCatalog(_) => "invalid_catalog",
            Self::Contract(_) => "contract",
            Self::Input(_) => "input",
            Self::Undefined(_) => "undefined",
            Self::JudgeUnavailable { .. } => "judge_unavailable",
            Self::ServiceContract { .. } => "service_contract",
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
        }
    }
}
