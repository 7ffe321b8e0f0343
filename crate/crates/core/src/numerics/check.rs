//! Central finite-difference oracle for gradient verification.
//!
//! The oracle exercises only the forward path: it re-evaluates a scalar
//! builder at perturbed inputs and differences the results. It is
//! deliberately independent of [`Tape::backward`](super::Tape::backward),
//! which it exists to check.

use super::tensor::c;
use super::{Real, TensorData};

/// Central finite differences of `f` with respect to every element of every
/// input, with symmetric step `h`.
pub fn central_diff<S, F>(mut f: F, inputs: &[TensorData<S>], h: f64) -> Vec<Vec<S>>
where
    S: Real,
    F: FnMut(&[TensorData<S>]) -> S,
{
    let step: S = c(h);
    let two_h: S = c(2.0 * h);
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![S::zero(); inputs[i].numel()];
        for e in 0..inputs[i].numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[e] = inputs[i].data()[e] + step;
            let fp = f(&shifted);
            shifted[i].data_mut()[e] = inputs[i].data()[e] - step;
            let fm = f(&shifted);
            g[e] = (fp - fm) / two_h;
        }
        grads.push(g);
    }
    grads
}

/// Worst regularised relative disagreement between analytic and numeric
/// gradients: `max |a - n| / (max(|a|, |n|) + floor)`.
pub fn max_rel_err<S: Real>(analytic: &[S], numeric: &[S], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let a = a.to_f64().unwrap();
        let n = n.to_f64().unwrap();
        let err = (a - n).abs() / (a.abs().max(n.abs()) + floor);
        worst = worst.max(err);
    }
    worst
}
