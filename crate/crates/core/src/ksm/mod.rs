//! Knowledge selection: feature networks, a deterministic actor that weighs
//! the four knowledge losses, and a critic trained from phase rewards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

mod mlp;
mod networks;
pub mod rewards;

pub use mlp::{Dense, Head, Mlp};
pub use networks::{
    actor_step, Action, Critic, CriticReport, KsmLearner, KsmNetworks, KsmShape, PhaseTarget,
    Transition, UpdateReport, NUM_KNOWLEDGE,
};
pub use rewards::{
    critic_step_loss, discounts, estimated_reward, exploration_reward_hard,
    exploration_reward_soft, phase_loss, td_target, DISCOUNT_FLOOR,
};

#[derive(Debug, Error)]
pub enum KsmError {
    #[error("invalid KSM configuration: {0}")]
    Config(String),
    #[error("invalid KSM input: {0}")]
    Input(String),
    #[error("state shape: {0}")]
    State(String),
    #[error("discount schedule: {0}")]
    Schedule(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = KsmError> = std::result::Result<T, E>;

/// How the actor's output weights the knowledge losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// Continuous weights.
    #[default]
    Soft,
    /// Binary gates from thresholding at `lambda`.
    Hard,
}

/// Dev-set metric whose improvement is the reward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMetric {
    /// Cross-entropy, rewarded as `before − after`.
    #[default]
    Loss,
    Accuracy,
    F1,
}

impl RewardMetric {
    /// Improvement from `before` to `after`, positive when the metric got better.
    pub fn improvement(self, before: f64, after: f64) -> f64 {
        match self {
            RewardMetric::Loss => before - after,
            RewardMetric::Accuracy | RewardMetric::F1 => after - before,
        }
    }

    pub fn pick(self, m: &crate::models::Metrics) -> f64 {
        match self {
            RewardMetric::Loss => m.loss,
            RewardMetric::Accuracy => m.accuracy,
            RewardMetric::F1 => m.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KsmConfig {
    /// Gate threshold for hard actions.
    pub lambda: f64,
    /// Steps per phase.
    pub phase_size: usize,
    /// Exploration reward scale.
    pub alpha: f64,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub feature_size: usize,
    /// Hidden width of the actor and critic.
    pub hidden_size: usize,
    /// Upper bound on training episodes.
    pub episodes: usize,
    pub reward_metric: RewardMetric,
    pub action_mode: ActionMode,
    /// Weight of the exploration term in the critic objective.
    pub exploration_weight: f64,
    /// `false` evaluates the dev set after every step instead of once per phase.
    pub phase_rewards: bool,
    /// Episodes without dev improvement before training stops.
    pub patience: usize,
    pub min_delta: f64,
    /// Evaluate rewards on the first `n` dev examples only.
    pub reward_subset_size: Option<usize>,
}

impl Default for KsmConfig {
    fn default() -> Self {
        KsmConfig {
            lambda: 0.3,
            phase_size: 32,
            alpha: 0.1,
            gamma: 0.98,
            actor_lr: 2e-4,
            critic_lr: 2e-4,
            feature_size: 8,
            hidden_size: 256,
            episodes: 10,
            reward_metric: RewardMetric::Loss,
            action_mode: ActionMode::Soft,
            exploration_weight: 1.0,
            phase_rewards: true,
            patience: 3,
            min_delta: 1e-4,
            reward_subset_size: None,
        }
    }
}

impl KsmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KsmError::Config(msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.phase_size == 0 {
            return bad("phase_size must be at least 1".into());
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return bad(format!("alpha {} must be non-negative", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.feature_size == 0 || self.hidden_size == 0 {
            return bad("network sizes must be positive".into());
        }
        if self.episodes == 0 {
            return bad("at least one episode is required".into());
        }
        if self.exploration_weight.is_nan() || self.exploration_weight < 0.0 {
            return bad("exploration_weight must be non-negative".into());
        }
        if self.reward_subset_size == Some(0) {
            return bad("reward_subset_size must be positive".into());
        }
        if self.gamma.powi(self.phase_size as i32) < DISCOUNT_FLOOR {
            return bad(format!(
                "gamma^{} underflows the discount floor; use a shorter phase",
                self.phase_size
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
