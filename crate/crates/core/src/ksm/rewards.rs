//! Scalar reward and value algebra shared by the learner and its tests.

use crate::losses::{harden, Weights};

use super::{KsmError, Result};

/// Smallest discount factor `γᵗ` that [`estimated_reward`] will divide by.
pub const DISCOUNT_FLOOR: f64 = 1e-6;

/// `γ¹, γ², …, γⁿ`, accumulated by repeated multiplication.
pub fn discounts(gamma: f64, n: usize) -> Vec<f64> {
    let mut acc = 1.0;
    (0..n)
        .map(|_| {
            acc *= gamma;
            acc
        })
        .collect()
}

fn gamma_pow(gamma: f64, t: i64) -> Result<f64> {
    if t < 0 {
        return Err(KsmError::Input(format!("step index {t} is negative")));
    }
    Ok(if t == 0 {
        1.0
    } else {
        discounts(gamma, t as usize)[t as usize - 1]
    })
}

/// Temporal-difference target `γᵗ·r + q_next`.
pub fn td_target(r: f64, t: i64, q_next: f64, gamma: f64) -> Result<f64> {
    Ok(gamma_pow(gamma, t)? * r + q_next)
}

/// Reward implied by two consecutive action values, `(q_t − q_next) / γᵗ`.
pub fn estimated_reward(q_t: f64, q_next: f64, t: i64, gamma: f64) -> Result<f64> {
    let d = gamma_pow(gamma, t)?;
    if d < DISCOUNT_FLOOR {
        return Err(KsmError::Schedule(format!(
            "discount γ^{t} = {d:e} is below {DISCOUNT_FLOOR:e}"
        )));
    }
    Ok((q_t - q_next) / d)
}

/// Mean squared error between predicted action values and their targets.
pub fn critic_step_loss(q_pred: &[f64], targets: &[f64]) -> Result<f64> {
    if q_pred.is_empty() || q_pred.len() != targets.len() {
        return Err(KsmError::Input(format!(
            "{} predictions for {} targets",
            q_pred.len(),
            targets.len()
        )));
    }
    Ok(q_pred
        .iter()
        .zip(targets)
        .map(|(q, y)| (q - y).powi(2))
        .sum::<f64>()
        / q_pred.len() as f64)
}

/// `(r_p − Σ r̂_t)²` for one phase.
pub fn phase_loss(estimated: &[f64], phase_reward: f64) -> Result<f64> {
    if estimated.is_empty() {
        return Err(KsmError::Input("phase has no steps".into()));
    }
    Ok((phase_reward - estimated.iter().sum::<f64>()).powi(2))
}

fn cosine(a: &Weights, b: &Weights) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(KsmError::Domain(
            "cosine similarity of a zero action".into(),
        ));
    }
    Ok(dot / (na * nb))
}

/// `α·(1 − mean cosine(a, a_l))` over the previous phase's actions; `α` when
/// there is no previous phase.
pub fn exploration_reward_soft(action: &Weights, previous: &[Weights], alpha: f64) -> Result<f64> {
    if previous.is_empty() {
        return Ok(alpha);
    }
    let mut sim = 0.0;
    for p in previous {
        sim += cosine(action, p)?;
    }
    Ok(alpha * (1.0 - sim / previous.len() as f64))
}

/// `α·(1 − count/k)`, where `count` is how often the previous phase used the
/// same gate vector; `α` when there is no previous phase.
pub fn exploration_reward_hard(
    action: &Weights,
    previous: &[Weights],
    alpha: f64,
    lambda: f64,
) -> f64 {
    if previous.is_empty() {
        return alpha;
    }
    let gate = harden(action, lambda);
    let count = previous
        .iter()
        .filter(|p| harden(p, lambda) == gate)
        .count();
    alpha * (1.0 - count as f64 / previous.len() as f64)
}
