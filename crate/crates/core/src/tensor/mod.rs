//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during one forward pass. Nodes are
//! appended in creation order, so parents always precede children and the
//! node list is already a topological order; [`Graph::backward`] simply walks
//! it in reverse. [`Tensor`] is a cheap `Copy` handle into the graph.
//!
//! Long-lived weights live in [`Param`] buffers owned by the models. Each
//! forward pass binds them into a fresh graph with [`Graph::param`]
//! (gradient tracked) or [`Graph::frozen`] (treated as a constant), and the
//! resulting [`Gradients`] are routed back with
//! [`Gradients::accumulate_into`].

use std::cell::RefCell;

use thiserror::Error;

use crate::scalar::Scalar;

pub mod gradcheck;
mod kernels;
mod ops;
pub mod optim;
mod param;
pub mod rng;

pub use optim::{Adam, AdamConfig, Optimizer, Sgd};
pub use param::{Param, ParamId};
pub use rng::Rng;

use kernels::Broadcast;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid arguments to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward root must hold a single value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Square,
    Sqrt,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        map: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        a: NodeId,
    },
    Scale {
        a: NodeId,
        factor: T,
    },
    AddScalar {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        n: usize,
    },
    LogSoftmax {
        a: NodeId,
        n: usize,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    SumLast {
        a: NodeId,
        n: usize,
    },
    L2Norm {
        a: NodeId,
    },
    L2NormLast {
        a: NodeId,
        n: usize,
    },
    Concat {
        parts: Vec<(NodeId, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        a: NodeId,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        a: NodeId,
    },
    Permute {
        a: NodeId,
        in_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    GatherRows {
        table: NodeId,
        rows: Vec<usize>,
        width: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        n: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Recording of one forward computation.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g, T> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> std::fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Tensor<'_, T> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            param,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Tensor<'_, T>> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "leaf",
                detail: format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad, None))
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.leaf(shape, data, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.leaf(shape, data, true)
    }

    pub fn scalar(&self, value: T) -> Tensor<'_, T> {
        self.push(vec![], vec![value], Op::Leaf, false, None)
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Tensor<'_, T> {
        let n = numel(&shape);
        self.push(shape, vec![T::zero(); n], Op::Leaf, false, None)
    }

    /// Binds a trainable parameter; its gradient is routed back by id.
    pub fn param(&self, p: &Param<T>) -> Tensor<'_, T> {
        self.push(
            p.shape().to_vec(),
            p.data.clone(),
            Op::Leaf,
            true,
            Some(p.id()),
        )
    }

    /// Binds a parameter as a constant.
    pub fn frozen(&self, p: &Param<T>) -> Tensor<'_, T> {
        self.push(p.shape().to_vec(), p.data.clone(), Op::Leaf, false, None)
    }

    /// Binds a parameter as trainable or frozen.
    pub fn bind(&self, p: &Param<T>, trainable: bool) -> Tensor<'_, T> {
        if trainable {
            self.param(p)
        } else {
            self.frozen(p)
        }
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Tensor<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.data.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if root_node.requires_grad {
            grads[root.id] = Some(vec![T::one()]);
        }
        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            ops::backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `t`, if `t` was reached.
    pub fn wrt(&self, t: Tensor<'_, T>) -> Option<&[T]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    pub fn shape_of(&self, t: Tensor<'_, T>) -> &[usize] {
        &self.shapes[t.id]
    }

    /// Summed gradient over every binding of parameter `id`.
    ///
    /// `None` if the parameter was never bound as trainable; zeros if it was
    /// bound but did not influence the root.
    pub fn param(&self, id: ParamId) -> Option<Vec<T>> {
        let mut out: Option<Vec<T>> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            let n = numel(&self.shapes[node]);
            let buf = out.get_or_insert_with(|| vec![T::zero(); n]);
            if let Some(g) = &self.grads[node] {
                buf.iter_mut().zip(g).for_each(|(b, &x)| *b = *b + x);
            }
        }
        out
    }

    /// Adds the gradients of every bound parameter into its buffer.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) {
        for p in params {
            if let Some(g) = self.param(p.id()) {
                p.accumulate_grad(&g);
            }
        }
    }
}

impl<'g, T: Scalar> Tensor<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the values.
    pub fn value(&self) -> Vec<T> {
        self.graph.nodes.borrow()[self.id].data.clone()
    }

    /// Runs `f` on the values without copying them.
    pub fn with_value<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].data)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        assert_eq!(
            node.data.len(),
            1,
            "item() on tensor of shape {:?}",
            node.shape
        );
        node.data[0]
    }

    /// Same values, cut off from the gradient graph.
    pub fn detach(self) -> Tensor<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].data.clone())
        };
        self.graph.push(shape, data, Op::Leaf, false, None)
    }
}
