//! Differentiable operations: forward evaluation on [`Tensor`] handles and the
//! matching reverse rules in [`backward_node`].

use crate::scalar::Scalar;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, Broadcast};
use super::rng::Rng;
use super::{BinaryKind, Graph, Node, NodeId, Op, Result, Tensor, TensorError, UnaryKind};

const GELU_COEF: f64 = 0.044_715;
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    // ½(1 + tanh u) = σ(2u); the exponential form is much cheaper than tanh.
    let u = T::lit(GELU_SQRT_2_OVER_PI) * (x + T::lit(GELU_COEF) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_COEF);
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let u = c * (x + k * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    s + T::lit(2.0) * x * s * (T::one() - s) * du
}

/// Source offsets of the contiguous blocks that make up a permuted tensor,
/// in output order, and the block length. Trailing axes that stay in place
/// are copied as one block.
fn permute_blocks(in_shape: &[usize], perm: &[usize]) -> (Vec<usize>, usize) {
    let rank = in_shape.len();
    let mut keep = rank;
    while keep > 0 && perm[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block: usize = in_shape[keep..].iter().product();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm[..keep].iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm[..keep].iter().map(|&p| in_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut starts = Vec::with_capacity(total);
    let mut idx = vec![0usize; keep];
    let mut src = 0usize;
    for _ in 0..total {
        starts.push(src);
        for d in (0..keep).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (starts, block)
}

impl<'g, T: Scalar> Graph<T> {
    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&'g self, parts: &[Tensor<'g, T>], axis: usize) -> Result<Tensor<'g, T>> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let nodes = self.nodes.borrow();
        let mut axis_total = 0;
        let mut meta = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &nodes[p.id].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
            meta.push((p.id, s[axis]));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &(id, len) in &meta {
                let chunk = len * inner;
                data.extend_from_slice(&nodes[id].data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = meta.iter().any(|&(id, _)| nodes[id].requires_grad);
        drop(nodes);
        let mut shape = base;
        shape[axis] = axis_total;
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: meta,
                outer,
                inner,
            },
            rg,
            None,
        ))
    }
}

// `add`, `mul` and friends return `Result` (shapes can mismatch), so they cannot be
// the operator traits.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Tensor<'g, T> {
    fn same_graph(&self, other: &Tensor<'g, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op,
                detail: "operands belong to different graphs".into(),
            })
        }
    }

    /// 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.same_graph(&rhs, "matmul")?;
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &a.data, &b.data, &mut out);
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            rg,
            None,
        ))
    }

    /// Batched product of `[B×m×k]` with `[B×k×n]`, or with `[B×n×k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(self, rhs: Tensor<'g, T>, trans_b: bool) -> Result<Tensor<'g, T>> {
        self.same_graph(&rhs, "bmm")?;
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        let bad = || TensorError::Shape {
            op: "bmm",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        };
        if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] {
            return Err(bad());
        }
        let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
        let n = if trans_b {
            if b.shape[2] != k {
                return Err(bad());
            }
            b.shape[1]
        } else {
            if b.shape[1] != k {
                return Err(bad());
            }
            b.shape[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ab = &a.data[i * m * k..(i + 1) * m * k];
            let bb = &b.data[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, ab, bb, cb);
            } else {
                gemm_nn(m, k, n, ab, bb, cb);
            }
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
            None,
        ))
    }

    fn binary(
        self,
        rhs: Tensor<'g, T>,
        kind: BinaryKind,
        op: &'static str,
    ) -> Result<Tensor<'g, T>> {
        self.same_graph(&rhs, op)?;
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        let (shape, map) = Broadcast::resolve(op, &a.shape, &b.shape)?;
        let len = numel(&shape);
        if kind == BinaryKind::Div && b.data.iter().any(|&x| x == T::zero()) {
            return Err(TensorError::Domain {
                op,
                detail: "division by zero".into(),
            });
        }
        let (ad, bd) = (&a.data, &b.data);
        let out = match kind {
            BinaryKind::Add => map.zip_map(len, ad, bd, |x, y| x + y),
            BinaryKind::Sub => map.zip_map(len, ad, bd, |x, y| x - y),
            BinaryKind::Mul => map.zip_map(len, ad, bd, |x, y| x * y),
            BinaryKind::Div => map.zip_map(len, ad, bd, |x, y| x / y),
        };
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: rhs.id,
                map,
            },
            rg,
            None,
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(rhs, BinaryKind::Add, "add")
    }

    pub fn sub(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(rhs, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(rhs, BinaryKind::Mul, "mul")
    }

    /// Elementwise quotient; any zero in the divisor is a domain error.
    pub fn div(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(rhs, BinaryKind::Div, "div")
    }

    fn unary(self, kind: UnaryKind) -> Tensor<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let out: Vec<T> = match kind {
            UnaryKind::Neg => a.data.iter().map(|&x| -x).collect(),
            UnaryKind::Exp => a.data.iter().map(|&x| x.exp()).collect(),
            UnaryKind::Log => a.data.iter().map(|&x| x.ln()).collect(),
            UnaryKind::Sigmoid => a.data.iter().map(|&x| sigmoid(x)).collect(),
            UnaryKind::Tanh => a.data.iter().map(|&x| x.tanh()).collect(),
            UnaryKind::Relu => a.data.iter().map(|&x| x.max(T::zero())).collect(),
            UnaryKind::Gelu => a.data.iter().map(|&x| gelu(x)).collect(),
            UnaryKind::Square => a.data.iter().map(|&x| x * x).collect(),
            UnaryKind::Sqrt => a.data.iter().map(|&x| x.sqrt()).collect(),
        };
        let (shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        self.graph
            .push(shape, out, Op::Unary { kind, a: self.id }, rg, None)
    }

    pub fn neg(self) -> Tensor<'g, T> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Tensor<'g, T> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural logarithm; non-positive entries are a domain error.
    pub fn log(self) -> Result<Tensor<'g, T>> {
        if self.with_value(|d| d.iter().any(|&x| x <= T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "non-positive operand".into(),
            });
        }
        Ok(self.unary(UnaryKind::Log))
    }

    pub fn sigmoid(self) -> Tensor<'g, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(self) -> Tensor<'g, T> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn relu(self) -> Tensor<'g, T> {
        self.unary(UnaryKind::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Tensor<'g, T> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn square(self) -> Tensor<'g, T> {
        self.unary(UnaryKind::Square)
    }

    /// Square root; negative entries are a domain error.
    pub fn sqrt(self) -> Result<Tensor<'g, T>> {
        if self.with_value(|d| d.iter().any(|&x| x < T::zero())) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: "negative operand".into(),
            });
        }
        Ok(self.unary(UnaryKind::Sqrt))
    }

    /// Multiplies every element by a constant.
    pub fn scale(self, factor: T) -> Tensor<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let out = a.data.iter().map(|&x| x * factor).collect();
        let (shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        self.graph
            .push(shape, out, Op::Scale { a: self.id, factor }, rg, None)
    }

    pub fn add_scalar(self, c: T) -> Tensor<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let out = a.data.iter().map(|&x| x + c).collect();
        let (shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        self.graph
            .push(shape, out, Op::AddScalar { a: self.id }, rg, None)
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        let shape = self.shape();
        match shape.last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(TensorError::Invalid {
                op,
                detail: format!("needs a non-empty last axis, got shape {shape:?}"),
            }),
        }
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(self) -> Result<Tensor<'g, T>> {
        let n = self.last_dim("softmax")?;
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let mut out = a.data.clone();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let (shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        Ok(self
            .graph
            .push(shape, out, Op::Softmax { a: self.id, n }, rg, None))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Tensor<'g, T>> {
        let n = self.last_dim("log_softmax")?;
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let mut out = a.data.clone();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let (shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        Ok(self
            .graph
            .push(shape, out, Op::LogSoftmax { a: self.id, n }, rg, None))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Tensor<'g, T> {
        let (s, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (a.data.iter().copied().sum::<T>(), a.requires_grad)
        };
        self.graph
            .push(vec![], vec![s], Op::Sum { a: self.id }, rg, None)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Tensor<'g, T> {
        let (s, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let n = T::from_usize_lossy(a.data.len().max(1));
            (a.data.iter().copied().sum::<T>() / n, a.requires_grad)
        };
        self.graph
            .push(vec![], vec![s], Op::Mean { a: self.id }, rg, None)
    }

    /// Sums the last axis away: `[.., n] -> [..]`.
    pub fn sum_last(self) -> Result<Tensor<'g, T>> {
        let n = self.last_dim("sum_last")?;
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let out = a
            .data
            .chunks_exact(n)
            .map(|r| r.iter().copied().sum())
            .collect();
        let mut shape = a.shape.clone();
        shape.pop();
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self
            .graph
            .push(shape, out, Op::SumLast { a: self.id, n }, rg, None))
    }

    /// Averages the last axis away.
    pub fn mean_last(self) -> Result<Tensor<'g, T>> {
        let n = self.last_dim("mean_last")?;
        Ok(self.sum_last()?.scale(T::one() / T::from_usize_lossy(n)))
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken as 0.
    pub fn l2_norm(self) -> Tensor<'g, T> {
        let (s, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (
                a.data.iter().map(|&x| x * x).sum::<T>().sqrt(),
                a.requires_grad,
            )
        };
        self.graph
            .push(vec![], vec![s], Op::L2Norm { a: self.id }, rg, None)
    }

    /// Euclidean norm over the last axis: `[.., n] -> [..]`.
    pub fn l2_norm_last(self) -> Result<Tensor<'g, T>> {
        let n = self.last_dim("l2_norm_last")?;
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let out = a
            .data
            .chunks_exact(n)
            .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let mut shape = a.shape.clone();
        shape.pop();
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self
            .graph
            .push(shape, out, Op::L2NormLast { a: self.id, n }, rg, None))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Tensor<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        if axis >= a.shape.len() || start + len > a.shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                detail: format!(
                    "range {start}..{} on axis {axis} of shape {:?}",
                    start + len,
                    a.shape
                ),
            });
        }
        let outer: usize = a.shape[..axis].iter().product();
        let inner: usize = a.shape[axis + 1..].iter().product();
        let axis_len = a.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&a.data[base..base + len * inner]);
        }
        let mut shape = a.shape.clone();
        shape[axis] = len;
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::Slice {
                a: self.id,
                outer,
                axis_len,
                start,
                len,
                inner,
            },
            rg,
            None,
        ))
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        if numel(&shape) != a.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: a.shape.clone(),
                rhs: shape,
            });
        }
        let (data, rg) = (a.data.clone(), a.requires_grad);
        drop(nodes);
        Ok(self
            .graph
            .push(shape, data, Op::Reshape { a: self.id }, rg, None))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Tensor<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let rank = a.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Invalid {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let (starts, block) = permute_blocks(&a.shape, perm);
        let mut out = Vec::with_capacity(a.data.len());
        for &src in &starts {
            out.extend_from_slice(&a.data[src..src + block]);
        }
        let shape = perm.iter().map(|&p| a.shape[p]).collect();
        let (in_shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::Permute {
                a: self.id,
                in_shape,
                perm: perm.to_vec(),
            },
            rg,
            None,
        ))
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Tensor<'g, T>> {
        self.permute(&[1, 0])
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Tensor<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let t = &nodes[self.id];
        if t.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                detail: format!("table must be 2-D, got {:?}", t.shape),
            });
        }
        let (r, w) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {r} rows"),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * w);
        for &i in rows {
            out.extend_from_slice(&t.data[i * w..(i + 1) * w]);
        }
        let rg = t.requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            vec![rows.len(), w],
            out,
            Op::GatherRows {
                table: self.id,
                rows: rows.to_vec(),
                width: w,
            },
            rg,
            None,
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        self,
        gamma: Tensor<'g, T>,
        beta: Tensor<'g, T>,
        eps: T,
    ) -> Result<Tensor<'g, T>> {
        let n = self.last_dim("layer_norm")?;
        let nodes = self.graph.nodes.borrow();
        let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
        if g.shape != [n] || b.shape != [n] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        let rows = x.data.len() / n;
        let nf = T::from_usize_lossy(n);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); x.data.len()];
        for r in 0..rows {
            let row = &x.data[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mu) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data[j] + b.data[j];
            }
        }
        let rg = x.requires_grad || g.requires_grad || b.requires_grad;
        let shape = x.shape.clone();
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                n,
                xhat,
                rstd,
            },
            rg,
            None,
        ))
    }

    /// Inverted dropout: zeroes entries with probability `p`, rescales the rest.
    pub fn dropout(self, p: f64, rng: &mut Rng) -> Result<Tensor<'g, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                detail: format!("rate {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(self);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.numel();
        let mask = (0..n)
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let mask = self.graph.constant(self.shape(), mask)?;
        self.mul(mask)
    }
}

#[inline]
fn acc_each<T: Scalar>(ga: &mut [T], f: impl Fn(usize) -> T) {
    for (i, v) in ga.iter_mut().enumerate() {
        *v = *v + f(i);
    }
}

fn with_grad<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: NodeId,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].data.len();
    let buf = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

/// Propagates `g` (the gradient of node `id`) into its parents.
pub(crate) fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    id: NodeId,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let bd = &nodes[b].data;
            with_grad(nodes, grads, a, |ga| gemm_nt(m, n, k, g, bd, ga));
            let ad = &nodes[a].data;
            with_grad(nodes, grads, b, |gb| gemm_tn(m, k, n, ad, g, gb));
        }
        &Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            with_grad(nodes, grads, a, |ga| {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        gemm_nn(m, n, k, gi, bi, gai);
                    } else {
                        gemm_nt(m, n, k, gi, bi, gai);
                    }
                }
            });
            with_grad(nodes, grads, b, |gb| {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm_tn(m, n, k, gi, ai, gbi);
                    } else {
                        gemm_tn(m, k, n, ai, gi, gbi);
                    }
                }
            });
        }
        Op::Binary { kind, a, b, map } => {
            let (a, b) = (*a, *b);
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            let len = g.len();
            match kind {
                BinaryKind::Add => {
                    with_grad(nodes, grads, a, |ga| {
                        map.for_each(len, |i, ia, _| ga[ia] = ga[ia] + g[i])
                    });
                    with_grad(nodes, grads, b, |gb| {
                        map.for_each(len, |i, _, ib| gb[ib] = gb[ib] + g[i])
                    });
                }
                BinaryKind::Sub => {
                    with_grad(nodes, grads, a, |ga| {
                        map.for_each(len, |i, ia, _| ga[ia] = ga[ia] + g[i])
                    });
                    with_grad(nodes, grads, b, |gb| {
                        map.for_each(len, |i, _, ib| gb[ib] = gb[ib] - g[i])
                    });
                }
                BinaryKind::Mul => {
                    with_grad(nodes, grads, a, |ga| {
                        map.for_each(len, |i, ia, ib| ga[ia] = ga[ia] + g[i] * bd[ib])
                    });
                    with_grad(nodes, grads, b, |gb| {
                        map.for_each(len, |i, ia, ib| gb[ib] = gb[ib] + g[i] * ad[ia])
                    });
                }
                BinaryKind::Div => {
                    with_grad(nodes, grads, a, |ga| {
                        map.for_each(len, |i, ia, ib| ga[ia] = ga[ia] + g[i] / bd[ib])
                    });
                    with_grad(nodes, grads, b, |gb| {
                        map.for_each(len, |i, ia, ib| {
                            gb[ib] = gb[ib] - g[i] * ad[ia] / (bd[ib] * bd[ib])
                        })
                    });
                }
            }
        }
        &Op::Unary { kind, a } => {
            let x = &nodes[a].data;
            let y = &node.data;
            with_grad(nodes, grads, a, |ga| {
                let one = T::one();
                let two = T::lit(2.0);
                match kind {
                    UnaryKind::Neg => acc_each(ga, |i| -g[i]),
                    UnaryKind::Exp => acc_each(ga, |i| g[i] * y[i]),
                    UnaryKind::Log => acc_each(ga, |i| g[i] / x[i]),
                    UnaryKind::Sigmoid => acc_each(ga, |i| g[i] * y[i] * (one - y[i])),
                    UnaryKind::Tanh => acc_each(ga, |i| g[i] * (one - y[i] * y[i])),
                    UnaryKind::Relu => {
                        acc_each(ga, |i| if x[i] > T::zero() { g[i] } else { T::zero() })
                    }
                    UnaryKind::Gelu => acc_each(ga, |i| g[i] * gelu_grad(x[i])),
                    UnaryKind::Square => acc_each(ga, |i| g[i] * two * x[i]),
                    UnaryKind::Sqrt => acc_each(ga, |i| g[i] / (two * y[i])),
                }
            });
        }
        &Op::Scale { a, factor } => {
            with_grad(nodes, grads, a, |ga| {
                ga.iter_mut()
                    .zip(g)
                    .for_each(|(x, &gi)| *x = *x + gi * factor)
            });
        }
        &Op::AddScalar { a } | &Op::Reshape { a } => {
            with_grad(nodes, grads, a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x = *x + gi)
            });
        }
        &Op::Softmax { a, n } => {
            let y = &node.data;
            with_grad(nodes, grads, a, |ga| {
                for ((yr, gr), gar) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(ga.chunks_exact_mut(n))
                {
                    let s: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        gar[j] = gar[j] + yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        &Op::LogSoftmax { a, n } => {
            let y = &node.data;
            with_grad(nodes, grads, a, |ga| {
                for ((yr, gr), gar) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(ga.chunks_exact_mut(n))
                {
                    let s: T = gr.iter().copied().sum();
                    for j in 0..n {
                        gar[j] = gar[j] + gr[j] - yr[j].exp() * s;
                    }
                }
            });
        }
        &Op::Sum { a } => {
            with_grad(nodes, grads, a, |ga| {
                ga.iter_mut().for_each(|x| *x = *x + g[0])
            });
        }
        &Op::Mean { a } => {
            let d = g[0] / T::from_usize_lossy(nodes[a].data.len().max(1));
            with_grad(nodes, grads, a, |ga| {
                ga.iter_mut().for_each(|x| *x = *x + d)
            });
        }
        &Op::SumLast { a, n } => {
            with_grad(nodes, grads, a, |ga| {
                for (r, gar) in ga.chunks_exact_mut(n).enumerate() {
                    gar.iter_mut().for_each(|x| *x = *x + g[r]);
                }
            });
        }
        &Op::L2Norm { a } => {
            let (x, y) = (&nodes[a].data, node.data[0]);
            if y > T::zero() {
                let s = g[0] / y;
                with_grad(nodes, grads, a, |ga| {
                    ga.iter_mut()
                        .zip(x)
                        .for_each(|(gv, &xv)| *gv = *gv + s * xv)
                });
            } else {
                with_grad(nodes, grads, a, |_| {});
            }
        }
        &Op::L2NormLast { a, n } => {
            let (x, y) = (&nodes[a].data, &node.data);
            with_grad(nodes, grads, a, |ga| {
                for (r, (gar, xr)) in ga.chunks_exact_mut(n).zip(x.chunks_exact(n)).enumerate() {
                    if y[r] > T::zero() {
                        let s = g[r] / y[r];
                        gar.iter_mut()
                            .zip(xr)
                            .for_each(|(gv, &xv)| *gv = *gv + s * xv);
                    }
                }
            });
        }
        Op::Concat {
            parts,
            outer,
            inner,
        } => {
            let total: usize = parts.iter().map(|&(_, l)| l).sum();
            let mut offset = 0;
            for &(pid, len) in parts {
                with_grad(nodes, grads, pid, |gp| {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for j in 0..len * inner {
                            gp[dst + j] = gp[dst + j] + g[src + j];
                        }
                    }
                });
                offset += len;
            }
        }
        &Op::Slice {
            a,
            outer,
            axis_len,
            start,
            len,
            inner,
        } => {
            with_grad(nodes, grads, a, |ga| {
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        ga[dst + j] = ga[dst + j] + g[src + j];
                    }
                }
            });
        }
        Op::Permute { a, in_shape, perm } => {
            let (starts, block) = permute_blocks(in_shape, perm);
            with_grad(nodes, grads, *a, |ga| {
                for (gb, &src) in g.chunks_exact(block).zip(&starts) {
                    for (x, &d) in ga[src..src + block].iter_mut().zip(gb) {
                        *x = *x + d;
                    }
                }
            });
        }
        Op::GatherRows { table, rows, width } => {
            let w = *width;
            with_grad(nodes, grads, *table, |gt| {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        gt[r * w + j] = gt[r * w + j] + g[i * w + j];
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            n,
            xhat,
            rstd,
        } => {
            let n = *n;
            let gam = &nodes[*gamma].data;
            with_grad(nodes, grads, *gamma, |gg| {
                for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        gg[j] = gg[j] + gr[j] * hr[j];
                    }
                }
            });
            with_grad(nodes, grads, *beta, |gb| {
                for gr in g.chunks_exact(n) {
                    for j in 0..n {
                        gb[j] = gb[j] + gr[j];
                    }
                }
            });
            let nf = T::from_usize_lossy(n);
            with_grad(nodes, grads, *x, |gx| {
                let mut dxh = vec![T::zero(); n];
                for (r, ((gr, hr), gxr)) in g
                    .chunks_exact(n)
                    .zip(xhat.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                    .enumerate()
                {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..n {
                        dxh[j] = gr[j] * gam[j];
                        m1 = m1 + dxh[j];
                        m2 = m2 + dxh[j] * hr[j];
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for j in 0..n {
                        gxr[j] = gxr[j] + rstd[r] * (dxh[j] - m1 - hr[j] * m2);
                    }
                }
            });
        }
    }
}
