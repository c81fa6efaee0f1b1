//! Knowledge distillation where an actor-critic module picks, at every
//! student step, how strongly to weight four kinds of teacher knowledge:
//! ground-truth finetuning, response (logits), feature (CLS embeddings) and
//! relation (FSP matrices between consecutive layers).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

use thiserror::Error;

pub mod data;
pub mod engine;
pub mod ksm;
pub mod losses;
pub mod models;
pub mod persist;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Ksm(#[from] ksm::KsmError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Persist(#[from] persist::PersistError),
}

impl Error {
    /// True when the error stems from an invalid setting rather than from data,
    /// IO or numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Data(data::DataError::Config(_))
            | Error::Model(models::ModelError::Config(_))
            | Error::Loss(losses::LossError::Config(_))
            | Error::Ksm(ksm::KsmError::Config(_))
            | Error::Persist(persist::PersistError::Config(_)) => true,
            Error::Engine(e) => e.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Param64 = tensor::Param<f64>;
pub type Param32 = tensor::Param<f32>;
pub type Encoder64 = models::Encoder<f64>;
pub type Encoder32 = models::Encoder<f32>;
pub type KsmNetworks64 = ksm::KsmNetworks<f64>;
pub type KsmNetworks32 = ksm::KsmNetworks<f32>;
pub type TeacherCache64 = engine::TeacherCache<f64>;
pub type TeacherCache32 = engine::TeacherCache<f32>;
