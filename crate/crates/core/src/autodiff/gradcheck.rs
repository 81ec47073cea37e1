//! Finite-difference oracle for gradient checks.
//!
//! Only evaluates the function forward; it never touches the backward path
//! it is used to check.

use super::Tensor;

/// Below this magnitude the relative error is measured against the floor.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Central differences of `f` with respect to every element of every input.
pub fn central_difference(
    inputs: &[Tensor],
    step: f64,
    f: impl Fn(&[Tensor]) -> f64,
) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].rows(), inputs[t].cols());
        for k in 0..inputs[t].numel() {
            let x0 = inputs[t].data()[k];
            work[t].data_mut()[k] = x0 + step;
            let up = f(&work);
            work[t].data_mut()[k] = x0 - step;
            let down = f(&work);
            work[t].data_mut()[k] = x0;
            grad.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// `max_k |a_k - b_k| / max(|a_k|, |b_k|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.numel(), numeric.numel(), "gradient sizes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}
