mod common;

use common::{logistic_data, LogReg};
use mpq::par::Exec;
use mpq::sensitivity::{hessian_diag_fd_with, FD_EPSILON};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Second difference of the loss itself, with no gradient code involved.
fn nested_fd(loss: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let at = |d: f64| {
                let mut t = theta.to_vec();
                t[i] += d;
                loss(&t)
            };
            (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h)
        })
        .collect()
}

#[test]
fn gradient_differences_match_loss_curvature() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let data = logistic_data(&mut rng, 16, &[0.5, 1.0, 3.0]);
    let batch = data.full_batch().unwrap();
    let theta = [0.4, -0.7, 0.2, 0.1];
    let grad = |t: &[f64]| LogReg::gradient(t, &batch);
    let reference = nested_fd(|t| LogReg::loss(t, &batch).unwrap(), &theta, 1e-4);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let h = hessian_diag_fd_with(exec, grad, &theta, FD_EPSILON).unwrap();
        for (a, b) in h.iter().zip(&reference) {
            assert!(
                (a - b).abs() <= 1e-3 * b.abs().max(1.0),
                "{h:?} vs {reference:?}"
            );
        }
    }
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = logistic_data(&mut rng, 64, &[1.0, 2.0]);
    let batch = data.full_batch().unwrap();
    let theta = [0.3, 0.3, -0.1];
    let grad = |t: &[f64]| LogReg::gradient(t, &batch);
    assert_eq!(
        hessian_diag_fd_with(Exec::Sequential, grad, &theta, FD_EPSILON).unwrap(),
        hessian_diag_fd_with(Exec::Parallel, grad, &theta, FD_EPSILON).unwrap()
    );
}
