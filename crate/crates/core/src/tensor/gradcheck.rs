use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite("finite_diff_check"));
    }
    tape.backward(loss)?;
    let analytic = tape.grad(xv)?;

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
