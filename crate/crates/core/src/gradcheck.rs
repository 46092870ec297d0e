//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Compare the tape gradient of a scalar function against central differences.
///
/// Returns `max_i |autodiff_i - central_i| / max(1e-8, |central_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true)?;
        let y = f(&mut tape, xv)?;
        let grads = tape.backward(y)?;
        grads.get_or_zeros(xv, x.shape())
    };
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point)?;
        let y = f(&mut tape, xv)?;
        let v = tape.value(y);
        if !v.is_scalar() {
            return Err(Error::contract("grad_check: function must be scalar-valued"));
        }
        Ok(v.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !central.is_finite() {
            return Err(Error::numeric(format!("non-finite central difference at coordinate {i}")));
        }
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
