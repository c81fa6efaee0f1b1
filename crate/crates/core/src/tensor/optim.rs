//! First-order optimizers over [`Param`] buffers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{Param, Result, TensorError};

/// Applies accumulated gradients to parameters, then clears the gradients.
pub trait Optimizer<T: Scalar> {
    /// Every parameter must carry a gradient; a missing one is a usage error
    /// and leaves all parameters untouched.
    fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()>;

    fn learning_rate(&self) -> f64;
}

fn require_grads<T: Scalar>(params: &[&mut Param<T>]) -> Result<()> {
    match params.iter().find(|p| p.grad.is_none()) {
        Some(p) => Err(TensorError::MissingGradient(p.name().to_string())),
        None => Ok(()),
    }
}

/// Plain gradient descent: `w ← w − lr·g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        require_grads(params)?;
        let lr = T::lit(self.lr);
        for p in params.iter_mut() {
            let g = p.grad.take().expect("checked above");
            p.data
                .iter_mut()
                .zip(&g)
                .for_each(|(w, &gi)| *w = *w - lr * gi);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are matched to parameters by
/// position, so the parameter list must keep a fixed order across steps.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        require_grads(params)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.numel())
        {
            return Err(TensorError::Invalid {
                op: "adam",
                detail: "parameter list changed between steps".into(),
            });
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::lit(1.0 - b1.powi(self.t));
        let bc2 = T::lit(1.0 - b2.powi(self.t));
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let (lr, eps) = (T::lit(self.cfg.lr), T::lit(self.cfg.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] = p.data[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }
}
