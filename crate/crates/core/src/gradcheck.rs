//! Central finite differences, the reference every backward rule is checked against.

use crate::tensor::Matrix;

/// Numerical gradient of the scalar `f` at `x`, one entry at a time.
pub fn central_diff_matrix(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Numerical derivative along a single coordinate.
pub fn central_diff_scalar(x: f64, h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Max-norm relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-8)`.
pub fn rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic
        .max_abs_diff(numeric)
        .expect("gradient shapes must agree");
    diff / analytic.max_abs().max(numeric.max_abs()).max(1e-8)
}

pub fn rel_err_scalar(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
