//! Finite-difference gradient verification used by the test suite.

use std::sync::Arc;

use super::{AdError, Tape, Tensor, Var};

/// Compare the tape gradient of `build` with central differences at `point`.
/// `build` receives a fresh tape and the leaf for the point and must return
/// the scalar loss node. Returns the worst relative error over all entries.
pub fn check_gradient(
    point: &Tensor,
    build: impl Fn(&mut Tape, Var) -> Result<Var, AdError>,
) -> Result<f64, AdError> {
    let mut tape = Tape::new();
    let x = tape.leaf(Arc::new(point.clone()));
    let loss = build(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(x, &point.shape);

    let eval = |t: &Tensor| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let x = tape.leaf(Arc::new(t.clone()));
        let loss = build(&mut tape, x)?;
        Ok(tape.value(loss).data[0])
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let eps = 1e-5 * point.data[i].abs().max(1.0);
        let mut plus = point.clone();
        plus.data[i] += eps;
        let mut minus = point.clone();
        minus.data[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-10);
        worst = worst.max(rel);
    }
    Ok(worst)
}
