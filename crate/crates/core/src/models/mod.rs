//! Transformer encoder classifiers used as teacher and student.

use thiserror::Error;

use crate::tensor::TensorError;

mod encoder;
mod layer_map;
mod metrics;

pub use encoder::{Encoder, EncoderConfig, EncoderLayer, ModelOutput};
pub use layer_map::{skip_layer_map, LayerMap, MapRule};
pub use metrics::{evaluate, metrics_from_logits, predict_logits, Metrics};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
