use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

use super::rng::Rng;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter buffer inside a computation graph.
///
/// Only used to route gradients back to their owner; never feeds into any
/// numeric result, so allocation order does not affect reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable array that outlives individual computation graphs.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter shape does not match its data"
        );
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n])
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![value; n])
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn normal(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
        Self::new(name, shape, data)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(
            g.len(),
            self.data.len(),
            "gradient length for `{}`",
            self.name
        );
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b = *b + x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// True when data (and shape) are bitwise equal; ids and gradients are ignored.
    pub fn bit_eq(&self, other: &Param<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_eq(*b))
    }
}

/// A copy is a distinct parameter: it gets its own id.
impl<T: Scalar> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
        }
    }
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // f32 -> f64 widening is exact, so comparing the widened bits is exact too.
        self.as_f64().to_bits() == other.as_f64().to_bits()
    }
}
