//! Checkpoints, run configuration files, run manifests and the metrics log.

use std::path::{Path, PathBuf};

use thiserror::Error;

mod checkpoint;
mod config;
mod manifest;
mod metrics;

pub use checkpoint::{
    load_encoder, load_ksm, save_encoder, save_ksm, Checkpoint, CheckpointKind, TensorEntry,
    CHECKPOINT_VERSION,
};
pub use config::{
    apply_override, BaselineConfig, DataConfig, ModelConfig, RunConfig, SweepConfig,
    CONFIG_VERSION, REFERENCE_STUDENT_LRS,
};
pub use manifest::{sha256_file, RunManifest, MANIFEST_VERSION};
pub use metrics::{
    extract_metric, flatten_event, read_log, write_metric_csv, JsonlSink, MetricRow, LOG_VERSION,
};

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Ksm(#[from] crate::ksm::KsmError),
}

pub type Result<T, E = PersistError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> PersistError {
    PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}
