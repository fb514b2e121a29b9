//! Central finite-difference gradient checking.
//!
//! The relative error of coordinate `i` is
//! `|analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, GRAD_FLOOR)`.
//! The floor keeps coordinates whose true gradient is (near) zero from
//! turning rounding noise of the difference quotient into a huge ratio.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const GRAD_FLOOR: f64 = 1e-4;

/// Default step for [`grad_check`].
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` and returns the
/// largest relative error over all coordinates of `x`.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// scalar node. It is evaluated `2 * x.len() + 1` times.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_in_mode(f, x, eps, false)
}

/// [`grad_check`] with every graph built in training mode when `training`
/// is set (keyed dropout masks are identical across evaluations).
pub fn grad_check_in_mode<F>(f: F, x: &Tensor, eps: f64, training: bool) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutodiffError::GradCheck(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::with_training(training);
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        let out = g.value(y);
        if out.len() != 1 {
            return Err(AutodiffError::GradCheck(format!("function returned shape {:?}", out.shape())));
        }
        if !out.item().is_finite() {
            return Err(AutodiffError::GradCheck("function value is not finite".into()));
        }
        Ok(out.item())
    };

    let mut g = Graph::with_training(training);
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    if !g.value(y).item().is_finite() {
        return Err(AutodiffError::GradCheck("function value is not finite".into()));
    }
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g, x| g.sum(x), &x, 1e-2).is_err());
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::vector(vec![1e200]);
        let r = grad_check(
            |g, x| {
                let y = g.scale(x, 1e200)?;
                g.sum(y)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }
}
