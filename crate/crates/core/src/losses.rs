//! The four knowledge losses and their weighted combinations.
//!
//! Every loss is averaged over the batch rather than summed, so action
//! weights and learning rates mean the same thing at any batch size.
//! Teacher tensors are expected to be constants; nothing here routes
//! gradient into the teacher.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{LayerMap, MapRule};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Guard inside the CLS normalization so the feature loss is total.
pub const FEAT_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss input: {0}")]
    Input(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Knowledge types in action order.
pub const KNOWLEDGE_NAMES: [&str; 4] = ["fin", "res", "fea", "rel"];

/// Per-knowledge weights or gates, in the order fin, res, fea, rel.
pub type Weights = [f64; 4];

/// Divisor of the FSP outer product.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FspDivisor {
    /// Embedding dimension `H`.
    #[default]
    Dim,
    /// Euclidean norm of the first vector.
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    /// KL(teacher ‖ student) instead of KL(student ‖ teacher).
    pub kl_teacher_first: bool,
    pub fsp_divisor: FspDivisor,
    pub layer_map_rule: MapRule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 1.0,
            kl_teacher_first: false,
            fsp_divisor: FspDivisor::Dim,
            layer_map_rule: MapRule::Ceil,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn batch_size<T: Scalar>(t: Tensor<'_, T>, op: &str) -> Result<usize> {
    match t.shape().as_slice() {
        [b, _] if *b > 0 => Ok(*b),
        s => Err(LossError::Input(format!(
            "{op}: expected a non-empty [batch × n] tensor, got {s:?}"
        ))),
    }
}

fn check_same<T: Scalar>(a: Tensor<'_, T>, b: Tensor<'_, T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::Input(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn loss_fink<'g, T: Scalar>(logits: Tensor<'g, T>, labels: &[usize]) -> Result<Tensor<'g, T>> {
    let b = batch_size(logits, "fink")?;
    let c = logits.shape()[1];
    if labels.len() != b {
        return Err(LossError::Input(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let mut onehot = vec![T::zero(); b * c];
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(LossError::Input(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        onehot[r * c + y] = T::one();
    }
    let onehot = logits.graph().constant(vec![b, c], onehot)?;
    let picked = logits.log_softmax()?.mul(onehot)?.sum();
    Ok(picked.scale(T::lit(-1.0 / b as f64)))
}

/// Mean KL divergence between temperature-softened distributions,
/// student first unless `teacher_first`.
pub fn loss_resk<'g, T: Scalar>(
    student: Tensor<'g, T>,
    teacher: Tensor<'g, T>,
    temperature: f64,
    teacher_first: bool,
) -> Result<Tensor<'g, T>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(LossError::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    check_same(student, teacher, "resk")?;
    let b = batch_size(student, "resk")?;
    let inv = T::lit(1.0 / temperature);
    let log_s = student.scale(inv).log_softmax()?;
    let log_t = teacher.scale(inv).log_softmax()?;
    let kl = if teacher_first {
        log_t.exp().mul(log_t.sub(log_s)?)?
    } else {
        log_s.exp().mul(log_s.sub(log_t)?)?
    };
    Ok(kl.sum().scale(T::lit(1.0 / b as f64)))
}

fn unit_rows<'g, T: Scalar>(h: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let b = h.shape()[0];
    let norm = h
        .square()
        .sum_last()?
        .add_scalar(T::lit(FEAT_NORM_EPS))
        .sqrt()?;
    Ok(h.div(norm.reshape(vec![b, 1])?)?)
}

/// Distance between unit-normalized student and mapped teacher CLS
/// embeddings, summed over student layers and averaged over the batch.
pub fn loss_feak<'g, T: Scalar>(
    student_cls: &[Tensor<'g, T>],
    teacher_cls: &[Tensor<'g, T>],
    map: &LayerMap,
) -> Result<Tensor<'g, T>> {
    check_depths(student_cls, teacher_cls, map)?;
    let b = batch_size(student_cls[0], "feak")?;
    let mut total: Option<Tensor<'g, T>> = None;
    for (i, t) in map.pairs() {
        let (hs, ht) = (student_cls[i - 1], teacher_cls[t - 1]);
        check_same(hs, ht, "feak")?;
        let d = unit_rows(hs)?.sub(unit_rows(ht)?)?.l2_norm_last()?.sum();
        total = Some(match total {
            Some(acc) => acc.add(d)?,
            None => d,
        });
    }
    Ok(total
        .expect("layer map is non-empty")
        .scale(T::lit(1.0 / b as f64)))
}

fn check_depths<T: Scalar>(s: &[Tensor<'_, T>], t: &[Tensor<'_, T>], map: &LayerMap) -> Result<()> {
    if s.len() != map.student_depth() || t.len() != map.teacher_depth() {
        return Err(LossError::Input(format!(
            "layer map expects {} student and {} teacher layers, got {} and {}",
            map.student_depth(),
            map.teacher_depth(),
            s.len(),
            t.len()
        )));
    }
    Ok(())
}

/// Batched FSP matrices `h1 h2ᵀ / d` for `[batch × H]` inputs, shape
/// `[batch × H × H]`.
pub fn fsp_matrix<'g, T: Scalar>(
    h1: Tensor<'g, T>,
    h2: Tensor<'g, T>,
    divisor: FspDivisor,
) -> Result<Tensor<'g, T>> {
    check_same(h1, h2, "fsp")?;
    let (b, h) = match h1.shape().as_slice() {
        [b, h] => (*b, *h),
        s => {
            return Err(LossError::Input(format!(
                "fsp: expected [batch × H], got {s:?}"
            )))
        }
    };
    let outer = h1
        .reshape(vec![b, h, 1])?
        .bmm(h2.reshape(vec![b, 1, h])?, false)?;
    Ok(match divisor {
        FspDivisor::Dim => outer.scale(T::lit(1.0 / h as f64)),
        FspDivisor::Norm => {
            let n = h1
                .square()
                .sum_last()?
                .add_scalar(T::lit(FEAT_NORM_EPS))
                .sqrt()?;
            outer.div(n.reshape(vec![b, 1, 1])?)?
        }
    })
}

/// Mean squared difference between student and teacher FSP matrices of
/// consecutive layers, summed over layer pairs and averaged over the batch.
/// The teacher matrix pairs the mapped layers of the same sample.
pub fn loss_relk<'g, T: Scalar>(
    student_cls: &[Tensor<'g, T>],
    teacher_cls: &[Tensor<'g, T>],
    map: &LayerMap,
    divisor: FspDivisor,
) -> Result<Tensor<'g, T>> {
    check_depths(student_cls, teacher_cls, map)?;
    if map.student_depth() < 2 {
        return Err(LossError::Config(
            "relation loss needs at least two student layers".into(),
        ));
    }
    let (b, h) = {
        let s = student_cls[0].shape();
        (batch_size(student_cls[0], "relk")?, s[1])
    };
    let mut total: Option<Tensor<'g, T>> = None;
    for i in 1..map.student_depth() {
        let gs = fsp_matrix(student_cls[i - 1], student_cls[i], divisor)?;
        let gt = fsp_matrix(
            teacher_cls[map.teacher(i) - 1],
            teacher_cls[map.teacher(i + 1) - 1],
            divisor,
        )?;
        let se = gs.sub(gt)?.square().sum();
        total = Some(match total {
            Some(acc) => acc.add(se)?,
            None => se,
        });
    }
    Ok(total
        .expect("at least one pair")
        .scale(T::lit(1.0 / (b * h * h) as f64)))
}

/// The four knowledge losses of one batch.
#[derive(Debug, Clone, Copy)]
pub struct KnowledgeLosses<'g, T: Scalar> {
    pub fin: Tensor<'g, T>,
    pub res: Tensor<'g, T>,
    pub fea: Tensor<'g, T>,
    /// Constant zero when the student has a single layer.
    pub rel: Tensor<'g, T>,
    pub rel_available: bool,
}

impl<'g, T: Scalar> KnowledgeLosses<'g, T> {
    /// Student outputs against constant teacher outputs of the same batch.
    pub fn compute(
        student_logits: Tensor<'g, T>,
        student_cls: &[Tensor<'g, T>],
        teacher_logits: Tensor<'g, T>,
        teacher_cls: &[Tensor<'g, T>],
        labels: &[usize],
        map: &LayerMap,
        cfg: &DistillConfig,
    ) -> Result<Self> {
        let fin = loss_fink(student_logits, labels)?;
        let res = loss_resk(
            student_logits,
            teacher_logits,
            cfg.temperature,
            cfg.kl_teacher_first,
        )?;
        let fea = loss_feak(student_cls, teacher_cls, map)?;
        let rel_available = map.student_depth() >= 2;
        let rel = if rel_available {
            loss_relk(student_cls, teacher_cls, map, cfg.fsp_divisor)?
        } else {
            student_logits.graph().scalar(T::zero())
        };
        Ok(KnowledgeLosses {
            fin,
            res,
            fea,
            rel,
            rel_available,
        })
    }

    pub fn as_array(&self) -> [Tensor<'g, T>; 4] {
        [self.fin, self.res, self.fea, self.rel]
    }

    pub fn values(&self) -> Weights {
        self.as_array().map(|t| t.item().as_f64())
    }
}

/// `Σ a_m · L_m`.
pub fn combine_soft<'g, T: Scalar>(
    losses: &[Tensor<'g, T>; 4],
    a: &Weights,
) -> Result<Tensor<'g, T>> {
    let mut acc = losses[0].scale(T::lit(a[0]));
    for m in 1..4 {
        acc = acc.add(losses[m].scale(T::lit(a[m])))?;
    }
    Ok(acc)
}

/// Gate `g(a_m) = 1` iff `a_m ≥ λ`.
pub fn harden(a: &Weights, lambda: f64) -> Weights {
    a.map(|v| if v >= lambda { 1.0 } else { 0.0 })
}

/// `Σ g(a_m) · L_m`.
pub fn combine_hard<'g, T: Scalar>(
    losses: &[Tensor<'g, T>; 4],
    a: &Weights,
    lambda: f64,
) -> Result<Tensor<'g, T>> {
    combine_soft(losses, &harden(a, lambda))
}
