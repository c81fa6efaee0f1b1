//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates the function forward; it never looks at
//! the reverse rules, so it is an independent oracle for them.

use crate::scalar::Scalar;

use super::{Graph, Result, Tensor};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// (input index, coordinate, analytic, numeric) for the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Denominator floor for [`rel_error`]; below it the comparison is absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given `step`.
///
/// `f` receives one tracked leaf per entry of `inputs` (shape, values) and
/// must return a single-element tensor.
pub fn check<F>(inputs: &[(Vec<usize>, Vec<f64>)], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Tensor<'g, f64>]) -> Result<Tensor<'g, f64>>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let g = Graph::new();
        let leaves = inputs
            .iter()
            .zip(vals)
            .map(|((s, _), v)| g.constant(s.clone(), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&g, &leaves)?.item())
    };

    let g = Graph::new();
    let leaves = inputs
        .iter()
        .map(|(s, v)| g.variable(s.clone(), v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&g, &leaves)?;
    let grads = g.backward(root)?;

    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .wrt(*leaf)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].1.len()]);
        for j in 0..vals[i].len() {
            let orig = vals[i][j];
            vals[i][j] = orig + step;
            let up = eval(&vals)?;
            vals[i][j] = orig - step;
            let down = eval(&vals)?;
            vals[i][j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_error(analytic[j], numeric);
            out.checked += 1;
            if out.checked == 1 || err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = (i, j, analytic[j], numeric);
            }
        }
    }
    Ok(out)
}

/// Same as [`check`] but for parameters of any scalar type, computed in the
/// caller's precision. Used by model-level checks.
pub fn numeric_gradient<T: Scalar>(
    values: &mut [T],
    step: f64,
    mut eval: impl FnMut(&[T]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for j in 0..values.len() {
        let orig = values[j];
        values[j] = T::lit(orig.as_f64() + step);
        let up = eval(values)?;
        values[j] = T::lit(orig.as_f64() - step);
        let down = eval(values)?;
        values[j] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}
