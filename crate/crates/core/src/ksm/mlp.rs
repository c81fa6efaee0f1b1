use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Graph, Param, Rng, Tensor};

use super::{KsmError, Result};

/// Output nonlinearity of an [`Mlp`]. Hidden layers always use ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Linear,
    Sigmoid,
}

/// Fully connected layer `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Dense<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
}

/// Multi-layer perceptron over row-major `[n × in]` inputs.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub layers: Vec<Dense<T>>,
    pub head: Head,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes = [in, hidden.., out]`. Weights and biases are drawn from
    /// `U(-1/√in, 1/√in)` per layer.
    pub fn new(name: &str, sizes: &[usize], head: Head, rng: &mut Rng) -> Result<Self> {
        Self::build(name, sizes, head, |shape, fan_in| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            (0..n)
                .map(|_| T::lit((2.0 * rng.uniform() - 1.0) * bound))
                .collect()
        })
    }

    /// All weights and biases zero.
    pub fn zeros(name: &str, sizes: &[usize], head: Head) -> Result<Self> {
        Self::build(name, sizes, head, |shape, _| {
            vec![T::zero(); shape.iter().product()]
        })
    }

    fn build(
        name: &str,
        sizes: &[usize],
        head: Head,
        mut init: impl FnMut(&[usize], usize) -> Vec<T>,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(KsmError::Config(format!(
                "invalid layer sizes {sizes:?} for `{name}`"
            )));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let w_shape = vec![io[0], io[1]];
                let w = init(&w_shape, io[0]);
                let b = init(&[io[1]], io[0]);
                Dense {
                    w: Param::new(format!("{name}.{i}.w"), w_shape, w),
                    b: Param::new(format!("{name}.{i}.b"), vec![io[1]], b),
                }
            })
            .collect();
        Ok(Mlp { layers, head })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].w.shape()[0]
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].w.shape()[1]
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        x: Tensor<'g, T>,
        trainable: bool,
    ) -> Result<Tensor<'g, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_size() {
            return Err(KsmError::Input(format!(
                "expected [n × {}] input, got {shape:?}",
                self.input_size()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h
                .matmul(g.bind(&layer.w, trainable))?
                .add(g.bind(&layer.b, trainable))?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(match self.head {
            Head::Linear => h,
            Head::Sigmoid => h.sigmoid(),
        })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// Bitwise equality of every weight.
    pub fn bit_eq(&self, other: &Mlp<T>) -> bool {
        self.head == other.head
            && self.layers.len() == other.layers.len()
            && self
                .params()
                .iter()
                .zip(other.params())
                .all(|(a, b)| a.bit_eq(b))
    }
}
