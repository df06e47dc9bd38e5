//! Finite-difference gradient oracle.
//!
//! Central differences are slow and exact to O(h^2), which makes them the
//! right referee for every analytic gradient in this crate: the oracle knows
//! nothing about how a loss is computed, it only probes the scalar function.

use crate::error::{CoreError, Result};

/// Central-difference gradient of `f` at `at` with step `h`:
/// `g_i = (f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// Any non-finite probe value invalidates the oracle and is an error.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    at: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CoreError::Oracle {
                op: "finite_diff_grad",
                msg: format!("non-finite probe at coordinate {i}: f+={plus}, f-={minus}"),
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Norm-based relative disagreement between an analytic gradient and a
/// numeric one: `|a - n| / max(|a| + |n|, 1e-12)` in the L2 norm. Zero
/// gradients compare equal.
pub fn grad_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = (na.sqrt() + nn.sqrt()).max(1e-12);
    diff.sqrt() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x[0] * x[0];
        let g = finite_diff_grad(f, &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-8, "got {}", g[0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |_: &[f64]| 4.2;
        let g = finite_diff_grad(f, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multivariate_polynomial() {
        // f = x0^2 * x1 + sin(x1), df/dx0 = 2 x0 x1, df/dx1 = x0^2 + cos(x1)
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].sin();
        let at = [1.5, -0.7];
        let g = finite_diff_grad(f, &at, 1e-6).unwrap();
        let expect = [2.0 * 1.5 * -0.7, 1.5 * 1.5 + (-0.7f64).cos()];
        assert!(grad_rel_error(&expect, &g) < 1e-8);
    }

    #[test]
    fn non_finite_probe_is_an_oracle_error() {
        let f = |x: &[f64]| x[0].ln();
        // Probing around 0 hits ln of a negative number.
        match finite_diff_grad(f, &[0.0], 1e-5) {
            Err(CoreError::Oracle { .. }) => {}
            other => panic!("expected oracle error, got {other:?}"),
        }
    }

    #[test]
    fn rel_error_on_equal_zero_gradients_is_zero() {
        assert_eq!(grad_rel_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }
}
