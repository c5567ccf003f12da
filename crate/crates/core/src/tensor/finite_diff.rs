use super::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of a scalar function:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
///
/// This is the independent oracle for every reverse-mode gradient in the
/// crate; it only ever evaluates `f` forward.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
///
/// When both gradients are tiny (below 1e-10 in norm) the absolute error is
/// returned instead, so an all-zero gradient matched by an all-zero oracle
/// reads as 0.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error on mismatched shapes");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
