use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences.
///
/// `f` builds the function on a fresh tape from the given input variable and
/// returns the scalar output. The result is
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let mut p = point.clone();
    p.set_requires_grad(true);
    let x = tape.leaf(p);
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&mut tape, x)?;
        tape.item(y)
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        // Use the representable perturbations actually applied.
        let xi = point.data()[i];
        let (hi, lo) = (xi + h, xi - h);
        let mut plus = point.clone();
        plus.data_mut()[i] = hi;
        let mut minus = point.clone();
        minus.data_mut()[i] = lo;
        let numeric = (eval(plus)? - eval(minus)?) / (hi - lo);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
