//! Central finite differences, used as an independent oracle for the
//! hand-written backward rules. Only forward evaluations are involved.

use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for coordinate `idx` of the leaf
/// `param`. The leaf value is restored afterwards.
pub fn central_difference(param: &Tensor, idx: usize, h: f64, mut f: impl FnMut() -> f64) -> f64 {
    let orig = param.data()[idx];
    param.with_data_mut(|d| d[idx] = orig + h);
    let plus = f();
    param.with_data_mut(|d| d[idx] = orig - h);
    let minus = f();
    param.with_data_mut(|d| d[idx] = orig);
    (plus - minus) / (2.0 * h)
}

/// Relative error with a floor of `1e-6` on the scale, so gradients that are
/// numerically zero compare by absolute difference.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
