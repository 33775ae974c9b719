//! Central finite-difference gradient oracle.

use crate::error::{AmssError, Result};
use crate::params::{GradientSet, ParamStore};
use crate::tensor::relative_error;

/// Estimates `∂f/∂w_j` as `(f(w + eps·e_j) − f(w − eps·e_j)) / (2·eps)` for
/// every scalar coordinate of every parameter.
pub fn finite_diff_gradient<F>(mut loss_fn: F, params: &ParamStore, eps: f64) -> Result<GradientSet>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(AmssError::InvalidInput(format!("eps must be > 0, got {eps}")));
    }
    let mut work = params.clone();
    let mut grads = GradientSet::zeros_like(params);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let plus = loss_fn(&work)?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let minus = loss_fn(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            grads.get_mut(id).data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Largest coordinate-wise relative error between two gradient sets.
pub fn max_relative_error(a: &GradientSet, b: &GradientSet) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}
