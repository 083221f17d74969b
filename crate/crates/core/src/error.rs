use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AmiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AmiError {
    #[error("input error: {0}")]
    Input(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backbone contract error: {0}")]
    Backbone(String),

    #[error("non-finite value in {stage}{}", .block.map(|b| format!(" (block {b})")).unwrap_or_default())]
    Numeric { stage: String, block: Option<usize> },

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AmiError {
    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AmiError::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmiError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AmiError::Config(_) | AmiError::Contract(_) => 2,
            AmiError::Numeric { .. } => 4,
            _ => 3,
        }
    }
}
