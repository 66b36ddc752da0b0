//! Central finite-difference verification of tape gradients.

use super::{NumError, Result, Tape, Tensor, Var};

/// Largest relative disagreement between the tape gradient of `f` at `x`
/// and a central difference with step `h`, taken over all coordinates:
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    if !y.item().is_finite() {
        return Err(NumError::NonFinite { coord: 0 });
    }
    let analytic = tape.backward(y)?.get(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |pt: Tensor, coord: usize| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(pt);
        let out = f(&tape, v)?.item();
        if out.is_finite() {
            Ok(out)
        } else {
            Err(NumError::NonFinite { coord })
        }
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(NumError::NonFinite { coord: i });
        }
        let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
