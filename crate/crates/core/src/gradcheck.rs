//! Central finite-difference gradient checking in 64-bit precision.
//!
//! The checker only ever evaluates the forward pass, so it is independent of
//! every backward rule it validates.

use alloc::vec::Vec;

use crate::tensor::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::Result;

/// Step used by [`check`].
pub const EPSILON: f64 = 1e-4;
/// Floor on the analytic magnitude in the relative error denominator.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Report {
    /// `max |analytic - numeric| / max(|analytic|, 1e-6)` over all inputs.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares backward-mode gradients of the scalar produced by `f` with
/// central differences, perturbing every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<Report>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut report = Report { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + EPSILON;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - EPSILON;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPSILON);
            let a = grad.data()[i];
            let abs = num_traits::Float::abs(a - numeric);
            let rel = abs / num_traits::Float::max(num_traits::Float::abs(a), MAGNITUDE_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// The same comparison for a model whose loss is built from a parameter
/// set. Up to `per_tensor` evenly spaced elements of each listed parameter
/// are perturbed.
pub fn check_params<F>(params: &ParamSet<f64>, ids: &[ParamId], per_tensor: usize, f: F) -> Result<Report>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| true);
    let loss = f(&mut g, params, &bound)?;
    let grads = g.backward(loss)?;

    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, |_| false);
        let out = f(&mut g, ps, &bound)?;
        Ok(g.item(out))
    };

    let mut report = Report { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work = params.clone();
    for &id in ids {
        let analytic = grads.get_or_zero(bound.var(id));
        let n = params.get(id).numel();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|j| j * n / per_tensor + (n / per_tensor) / 2).collect() };
        for i in picks {
            let orig = params.get(id).data()[i];
            work.values_mut(id)[i] = orig + EPSILON;
            let plus = eval(&work)?;
            work.values_mut(id)[i] = orig - EPSILON;
            let minus = eval(&work)?;
            work.values_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPSILON);
            let a = analytic.data()[i];
            let abs = num_traits::Float::abs(a - numeric);
            let rel = abs / num_traits::Float::max(num_traits::Float::abs(a), MAGNITUDE_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces a tensor output to a scalar through fixed pseudo-random weights,
/// so every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    let shape = g.shape(out).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + ((i * 37 + 11) % 17) as f64 / 17.0).collect())?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}
