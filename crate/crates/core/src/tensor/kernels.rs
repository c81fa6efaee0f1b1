//! Dense row-major kernels used by the differentiable ops.

use crate::scalar::Scalar;

use super::TensorError;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(
        a.len() == m * k && b.len() == k * n && c.len() == m * n,
        "gemm_nn operand sizes"
    );
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_acc(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(
        a.len() == m * k && b.len() == n * k && c.len() == m * n,
        "gemm_nt operand sizes"
    );
    // SAFETY: as in `gemm_nn`; `b` is read column-major.
    unsafe {
        T::gemm_acc(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(
        a.len() == m * k && b.len() == m * n && c.len() == k * n,
        "gemm_tn operand sizes"
    );
    // SAFETY: as in `gemm_nn`; `a` is read column-major.
    unsafe {
        T::gemm_acc(
            k,
            m,
            n,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index mapping between a broadcast output and its two operands.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    /// Both operands have the output shape.
    Same,
    /// The right operand's shape is a suffix of the left's and repeats.
    RightSuffix(usize),
    /// The left operand's shape is a suffix of the right's and repeats.
    LeftSuffix(usize),
    General {
        out_shape: Vec<usize>,
        a_strides: Vec<usize>,
        b_strides: Vec<usize>,
    },
}

impl Broadcast {
    /// Resolves numpy-style broadcasting of `a` against `b`.
    pub(crate) fn resolve(
        op: &'static str,
        a: &[usize],
        b: &[usize],
    ) -> Result<(Vec<usize>, Broadcast), TensorError> {
        if a == b {
            return Ok((a.to_vec(), Broadcast::Same));
        }
        if a.ends_with(b) {
            return Ok((a.to_vec(), Broadcast::RightSuffix(b.iter().product())));
        }
        if b.ends_with(a) {
            return Ok((b.to_vec(), Broadcast::LeftSuffix(a.iter().product())));
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            let d = match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::Shape {
                        op,
                        lhs: a.to_vec(),
                        rhs: b.to_vec(),
                    })
                }
            };
            out_shape.push(d);
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        let (a_strides, b_strides) = (strides(&pa), strides(&pb));
        Ok((
            out_shape.clone(),
            Broadcast::General {
                out_shape,
                a_strides,
                b_strides,
            },
        ))
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    #[inline]
    /// `f(a[ia], b[ib])` for every output position, collected in order.
    pub(crate) fn zip_map<T: Copy>(
        &self,
        len: usize,
        a: &[T],
        b: &[T],
        f: impl Fn(T, T) -> T,
    ) -> Vec<T> {
        match self {
            Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RightSuffix(n) => {
                let mut out = Vec::with_capacity(len);
                for chunk in a.chunks_exact((*n).max(1)) {
                    out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Broadcast::LeftSuffix(n) => {
                let mut out = Vec::with_capacity(len);
                for chunk in b.chunks_exact((*n).max(1)) {
                    out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Broadcast::General { .. } => {
                let mut out = Vec::with_capacity(len);
                self.for_each(len, |_, ia, ib| out.push(f(a[ia], b[ib])));
                out
            }
        }
    }

    pub(crate) fn for_each(&self, len: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Broadcast::Same => (0..len).for_each(|i| f(i, i, i)),
            Broadcast::RightSuffix(n) => {
                for base in (0..len).step_by((*n).max(1)) {
                    (0..*n).for_each(|j| f(base + j, base + j, j));
                }
            }
            Broadcast::LeftSuffix(n) => {
                for base in (0..len).step_by((*n).max(1)) {
                    (0..*n).for_each(|j| f(base + j, j, base + j));
                }
            }
            Broadcast::General {
                out_shape,
                a_strides,
                b_strides,
            } => {
                let rank = out_shape.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for i in 0..len {
                    f(i, ia, ib);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ia += a_strides[d];
                        ib += b_strides[d];
                        if idx[d] < out_shape[d] {
                            break;
                        }
                        ia -= a_strides[d] * idx[d];
                        ib -= b_strides[d] * idx[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}
