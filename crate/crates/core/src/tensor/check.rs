use super::{Graph, Result, Tensor, TensorError, Var};
use crate::Scalar;

fn eval<S: Scalar, F>(f: &mut F, x: Tensor<S>) -> Result<f64>
where
    F: FnMut(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = f(&mut g, xv)?;
    let t = g.value(out);
    if t.len() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item().as_f64())
}

/// Central-difference gradient of a scalar graph function at `x`.
pub fn numeric_gradient<S: Scalar, F>(mut f: F, x: &Tensor<S>, eps: S) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph<S>, Var) -> Result<Var>,
{
    let two_eps = 2.0 * eps.as_f64();
    let mut out = Vec::with_capacity(x.len());
    for coord in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[coord] += eps;
        let mut minus = x.clone();
        minus.data_mut()[coord] -= eps;
        let probe = |r: Result<f64>| match r {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(TensorError::NonFinite { .. }) => Err(TensorError::ProbeNonFinite { coord }),
            Err(e) => Err(e),
        };
        let fp = probe(eval(&mut f, plus))?;
        let fm = probe(eval(&mut f, minus))?;
        out.push((fp - fm) / two_eps);
    }
    Ok(out)
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<S: Scalar, F>(mut f: F, x: &Tensor<S>, eps: S) -> Result<f64>
where
    F: FnMut(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    };
    let numeric = numeric_gradient(f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}
