//! Finite-difference verification of reverse-mode gradients.

use crate::elem::Elem;
use crate::error::Result;
use crate::graph::{Graph, NodeRef};
use crate::tensor::Tensor;

/// Relative error between two scalars with a floor that maps 0-vs-0 to 0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / denom
}

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences, returning the maximum per-coordinate relative error.
///
/// `f` traces a scalar objective into a fresh graph from a leaf holding the
/// evaluation point. The analytic route differentiates one trace; the
/// numeric route re-traces `f` at `x ± eps` per coordinate and never touches
/// the gradient machinery.
pub fn finite_diff_check<F, Func>(f: Func, x: &Tensor<F>, eps: f64) -> Result<f64>
where
    F: Elem,
    Func: Fn(&mut Graph<F>, NodeRef) -> Result<NodeRef>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    // A trace that never touches the leaf has gradient identically zero.
    let analytic = match g.grad(out, &[leaf], false) {
        Ok(grads) => g.value(grads[0]).clone(),
        Err(crate::error::Error::Unreachable) => Tensor::zeros(x.shape().to_vec()),
        Err(e) => return Err(e),
    };

    let eval = |point: &Tensor<F>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.param(point.clone());
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item()?.to_f64())
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let v = x.data()[i].to_f64();
        let plus = eval(&x.with_element(i, F::from_f64(v + eps)))?;
        let minus = eval(&x.with_element(i, F::from_f64(v - eps)))?;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic.data()[i].to_f64(), numeric);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0]);
        let err = finite_diff_check(
            |g, leaf| g.norm_sq(leaf),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err={err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_vec(vec![0.3, -0.7]);
        let err = finite_diff_check(|g, _leaf| Ok(g.scalar(4.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }
}
