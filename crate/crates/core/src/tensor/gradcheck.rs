//! Central finite differences, the ground truth every analytic gradient in
//! the crate is tested against.

use super::Matrix;

/// Central-difference gradient of `f` at `x`:
/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every entry `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, eps: f64) -> Matrix {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Entries smaller than this are compared in absolute terms; central
/// differences at `eps = 1e-5` carry roughly 1e-11 of rounding noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest entrywise relative error. Shapes must agree.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let g = finite_diff_grad(|m| m.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.get(0, 0) - 2.0).abs() < 1e-6);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Matrix::filled(2, 3, 0.7);
        let g = finite_diff_grad(|_| 4.2, &x, 1e-5);
        assert_eq!(g, Matrix::zeros(2, 3));
    }

    #[test]
    fn probe_leaves_input_untouched() {
        let x = Matrix::row_vector(&[0.1, -0.3]);
        let mut seen = Vec::new();
        finite_diff_grad(
            |m| {
                seen.push(m.clone());
                0.0
            },
            &x,
            1e-3,
        );
        assert_eq!(seen.len(), 4);
        assert_eq!(seen[1].get(0, 1), -0.3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
