//! Central finite differences, used as an independent gradient oracle.

use super::Tensor;

/// Central-difference estimate `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn fd_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true derivative is essentially zero from
/// being judged on finite-difference rounding noise alone: with step `1e-6`
/// and an O(1) objective that noise is around `1e-10`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-5;
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| rel_error(a, b))
        .fold(0.0, f64::max)
}
