//! Central finite-difference oracle for tape gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("finite-difference evaluation".into()));
    }
    Ok(v)
}

/// Max over all coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    finite_diff_check_subset(f, point, eps, usize::MAX)
}

/// Like [`finite_diff_check`], probing at most `per_tensor` evenly strided
/// coordinates of each input tensor.
pub fn finite_diff_check_subset<F>(f: F, point: &[Tensor], eps: f64, per_tensor: usize) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    for (ti, t) in point.iter().enumerate() {
        let analytic = grads.get(vars[ti]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        if !analytic.is_finite() {
            return Err(TensorError::NonFinite("analytic gradient".into()));
        }
        let n = t.numel();
        let stride = if per_tensor >= n { 1 } else { n.div_ceil(per_tensor) };
        let mut probe = point.to_vec();
        for k in (0..n).step_by(stride) {
            let orig = t.data()[k];
            probe[ti].data_mut()[k] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[ti].data_mut()[k] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
