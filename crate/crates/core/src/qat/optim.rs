use crate::error::{Error, Result};
use crate::quant::ALPHA_FLOOR;

/// Heavy-ball SGD: `v <- momentum * v + g; theta <- theta - lr * v`.
/// Nothing is modified when a gradient is non-finite.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), velocity.len()],
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient in optimizer step"));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// [`sgd_step`] for quantizer ranges, which stay at or above the range floor.
pub fn range_step(
    alpha: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    sgd_step(alpha, grads, velocity, lr, momentum)?;
    for a in alpha {
        *a = a.max(ALPHA_FLOOR);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let (mut p, mut v) = (vec![0.5], vec![0.0]);
        sgd_step(&mut p, &[1.0], &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p, vec![-0.5]);
    }

    #[test]
    fn momentum_accumulates() {
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        sgd_step(&mut p, &[1.0], &mut v, 1.0, 0.9).unwrap();
        sgd_step(&mut p, &[1.0], &mut v, 1.0, 0.9).unwrap();
        assert!((p[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn range_is_floored() {
        let (mut a, mut v) = (vec![0.1], vec![0.0]);
        range_step(&mut a, &[5.0], &mut v, 1.0, 0.0).unwrap();
        assert_eq!(a, vec![ALPHA_FLOOR]);
    }

    #[test]
    fn bad_gradients_leave_state() {
        let (mut p, mut v) = (vec![1.0, 2.0], vec![0.1, 0.2]);
        assert!(matches!(
            sgd_step(&mut p, &[0.0, f64::INFINITY], &mut v, 1.0, 0.9),
            Err(Error::Numeric(_))
        ));
        assert_eq!((p, v), (vec![1.0, 2.0], vec![0.1, 0.2]));
        assert!(sgd_step(&mut [0.0], &[1.0, 2.0], &mut [0.0], 1.0, 0.0).is_err());
    }
}
