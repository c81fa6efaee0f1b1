use serde::{Deserialize, Serialize};

use crate::ksm::RewardMetric;
use crate::losses::Weights;
use crate::models::Metrics;

use super::Result;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// One student update.
    Step {
        run: String,
        episode: Option<usize>,
        epoch: usize,
        step: usize,
        phase: Option<usize>,
        /// Raw actor or random output; absent for fixed weights.
        action: Option<Weights>,
        /// Weights actually applied to the losses (gates in hard mode).
        weights: Weights,
        losses: Weights,
        total: f64,
        exploration: Option<f64>,
    },
    /// Dev reward at the end of a phase (or after every step in the
    /// non-phase ablation).
    Reward {
        run: String,
        episode: usize,
        phase: usize,
        step: usize,
        metric: RewardMetric,
        reward: f64,
        dev: Metrics,
    },
    KsmUpdate {
        run: String,
        episode: usize,
        phase: usize,
        critic_loss: f64,
        value_loss: f64,
        exploration_loss: f64,
        actor_value: f64,
    },
    Epoch {
        run: String,
        episode: Option<usize>,
        epoch: usize,
        step: usize,
        train_loss: f64,
        dev: Option<Metrics>,
    },
    Episode {
        run: String,
        episode: usize,
        steps: usize,
        reward_evals: usize,
        dev: Metrics,
        mean_action: Weights,
        best: bool,
    },
    RunEnd {
        run: String,
        steps: usize,
        dev: Metrics,
        test: Option<Metrics>,
    },
}

/// Destination for [`Event`]s.
pub trait EventSink {
    fn emit(&mut self, event: Event) -> Result<()>;

    /// Called at phase, epoch and episode boundaries.
    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _event: Event) -> Result<()> {
        Ok(())
    }
}

/// Keeps every event in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink(pub Vec<Event>);

impl EventSink for MemorySink {
    fn emit(&mut self, event: Event) -> Result<()> {
        self.0.push(event);
        Ok(())
    }
}

impl<S: EventSink + ?Sized> EventSink for &mut S {
    fn emit(&mut self, event: Event) -> Result<()> {
        (**self).emit(event)
    }

    fn flush(&mut self) -> Result<()> {
        (**self).flush()
    }
}

impl<S: EventSink + ?Sized> EventSink for Box<S> {
    fn emit(&mut self, event: Event) -> Result<()> {
        (**self).emit(event)
    }

    fn flush(&mut self) -> Result<()> {
        (**self).flush()
    }
}
