use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-4;

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error over all coordinates.
///
/// The step for coordinate `i` is `step * max(1, |x_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!(
            "grad_check: step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x).expect("leaf is tracked").to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(point.shape().to_vec(), data)?);
        let loss = f(&mut tape, x)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::numeric(
                "grad_check: non-finite loss at perturbed point",
            ));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let h = step * point.data()[i].abs().max(1.0);
        let mut plus = point.data().to_vec();
        plus[i] += h;
        let mut minus = point.data().to_vec();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let denom = g.abs().max(fd.abs()).max(REL_FLOOR);
        worst = worst.max((g - fd).abs() / denom);
    }
    Ok(worst)
}
