//! Central finite-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar function against central differences.
///
/// `f` builds the function on the given tape from the input variable. Returns
/// the maximum over elements of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.detached().with_requires_grad());
    let out = f(&mut tape, xv)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "function value {value} at the base point"
        )));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut worst = 0.0_f64;
    let mut probe = x.detached();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite derivative at element {i}: analytic {}, numeric {numeric}",
                analytic[i]
            )));
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
