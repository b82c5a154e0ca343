//! Central finite differences, the oracle every gradient rule is checked against.

use crate::{Element, Result, Tensor};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<E, F>(mut f: F, x: &Tensor<E>, h: f64) -> Result<Tensor<E>>
where
    E: Element,
    F: FnMut(&Tensor<E>) -> Result<E>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = E::from_f64(orig.as_f64() + h);
        let plus = f(&probe)?.as_f64();
        probe.data_mut()[i] = E::from_f64(orig.as_f64() - h);
        let minus = f(&probe)?.as_f64();
        probe.data_mut()[i] = orig;
        grad.push(E::from_f64((plus - minus) / (2.0 * h)));
    }
    Tensor::new(x.dims().to_vec(), grad)
}

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst coordinate-wise relative error and its flat index.
pub fn max_relative_error<E: Element>(analytic: &Tensor<E>, numeric: &Tensor<E>) -> (f64, usize) {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64()))
        .enumerate()
        .fold((0.0, 0), |(best, at), (i, e)| if e > best { (e, i) } else { (best, at) })
}
