//! Central finite-difference gradient checking.

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Max over all entries of `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must build a scalar from its argument and be deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, step, &all)
}

/// Same as [`finite_diff_check`] restricted to the given flat indices.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, step: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    probe.requires_grad = false;
    for &i in indices {
        if i >= x.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "finite_diff_check",
                index: i,
                size: x.len(),
            });
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient of `f` at `x` by one backward pass.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    let xv = g.leaf(&leaf);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    Ok(g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let out = f(&mut g, xv)?;
    if g.data(out).len() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok(g.data(out)[0])
}
