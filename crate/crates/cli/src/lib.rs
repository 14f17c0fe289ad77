//! The `txn-foundry` pipeline: every stage as a library function plus the
//! argument parsing that drives them.
//!
//! Each stage writes its artifacts and exactly one `manifest.json` into its
//! output directory, and checks the upstream manifest's schema hash and
//! artifact checksums before reading anything.

pub mod cmd;
pub mod config;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

pub use cmd::dispatch;
pub use config::PipelineConfig;
pub use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("upstream {path}: {reason}")]
    Upstream { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] txn_foundry::Error),

    #[error(transparent)]
    Service(#[from] embedsvc::SvcError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } | CliError::Core(txn_foundry::Error::Config { .. }) => "config",
            CliError::Io { .. } | CliError::Core(txn_foundry::Error::Io { .. }) => "io",
            CliError::Upstream { .. } | CliError::Core(txn_foundry::Error::SchemaHashMismatch { .. }) => {
                "upstream"
            }
            CliError::Core(_) => "pipeline",
            CliError::Service(_) => "service",
            CliError::Json(_) => "format",
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let field = match self {
            CliError::Config { field, .. } | CliError::Core(txn_foundry::Error::Config { field, .. }) => {
                Some(field.clone())
            }
            _ => None,
        };
        serde_json::json!({
            "error": { "kind": self.kind(), "field": field, "message": self.to_string() }
        })
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
