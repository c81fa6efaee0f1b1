//! Teacher training, KSM training episodes, distillation with a trained KSM,
//! and the fixed and random knowledge baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EncodedSplit;
use crate::ksm::KsmError;
use crate::losses::{DistillConfig, LossError, Weights};
use crate::models::{Encoder, LayerMap, Metrics, ModelError};
use crate::scalar::Scalar;
use crate::tensor::TensorError;

mod events;
mod ksm_train;
mod schedule;
mod student;
mod sweep;
mod teacher;


pub use events::{Event, EventSink, MemorySink, NullSink};
pub use ksm_train::{train_ksm, EpisodeSummary, KsmTrainReport};
pub use schedule::PhaseSchedule;
pub use student::{
    distill, run_fixed, run_random, run_student, Choice, FixedPolicy, KsmPolicy, Policy,
    RandomPolicy, RandomReport, RandomScope, StepInfo, StudentRun,
};
pub use sweep::{sweep, SinkFactory, SweepGrid, SweepPoint, SweepReport};
pub use teacher::{train_teacher, TeacherCache, TeacherReport};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("metrics sink: {0}")]
    Sink(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ksm(#[from] KsmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EngineError {
    /// True for invalid settings, as opposed to numeric or IO failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            EngineError::Config(_)
                | EngineError::Model(ModelError::Config(_))
                | EngineError::Loss(LossError::Config(_))
                | EngineError::Ksm(KsmError::Config(_))
        )
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Optimization schedule of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_batch_size: usize,
    /// Evaluate on the dev split after every epoch.
    pub epoch_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            eval_batch_size: 250,
            epoch_eval: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(EngineError::Config(
                "epochs and batch sizes must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EngineError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

/// How the knowledge weights of a run are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    KsmSoft,
    KsmHard,
    RandomAll,
    RandomOne,
    Fixed,
}

/// One student training run and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub run_id: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub weights: Option<Weights>,
    /// Dev metrics after each epoch, when epoch evaluation is on.
    pub trajectory: Vec<Metrics>,
    pub steps: usize,
    pub dev: Metrics,
    pub test: Option<Metrics>,
}

/// Everything a student run needs besides its knowledge policy.
pub struct StudentSetup<'a, T: Scalar> {
    pub teacher: &'a TeacherCache<T>,
    pub student_init: &'a Encoder<T>,
    pub train: &'a EncodedSplit,
    pub dev: &'a EncodedSplit,
    pub test: Option<&'a EncodedSplit>,
    pub map: LayerMap,
    pub distill: DistillConfig,
    pub schedule: TrainConfig,
    /// Seeds the shuffle and dropout streams.
    pub seed: u64,
}

impl<T: Scalar> StudentSetup<'_, T> {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.distill.validate()?;
        if self.dev.is_empty() {
            return Err(EngineError::Config("dev split is empty".into()));
        }
        if self.teacher.len() != self.train.len() {
            return Err(EngineError::Config(format!(
                "teacher cache holds {} examples, training split has {}",
                self.teacher.len(),
                self.train.len()
            )));
        }
        if self.map.student_depth() != self.student_init.config().num_layers
            || self.map.teacher_depth() != self.teacher.num_layers()
        {
            return Err(EngineError::Config(format!(
                "layer map {}→{} does not match student depth {} and teacher depth {}",
                self.map.student_depth(),
                self.map.teacher_depth(),
                self.student_init.config().num_layers,
                self.teacher.num_layers()
            )));
        }
        if self.steps_per_epoch() == 0 {
            return Err(EngineError::Config(format!(
                "batch size {} leaves no full batch in {} training examples",
                self.schedule.batch_size,
                self.train.len()
            )));
        }
        Ok(())
    }

    /// Full batches per epoch; partial batches are dropped.
    pub fn steps_per_epoch(&self) -> usize {
        self.train.len() / self.schedule.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.schedule.epochs
    }
}
