mod common;

use common::*;
use mpq::alloc::{
    fractional_solve, greedy_integer, objective, round_to_integer, satisfies, AllocationProblem,
    BitAllocation, ResourceConstraint,
};
use mpq::autodiff::Tensor;
use mpq::quant::{
    quantize, Granularity, QuantMode, QuantizerConfig, QuantizerId, QuantizerState, Role,
    Signedness,
};
use mpq::sensitivity::SensitivityEstimator;
use proptest::prelude::*;

fn hard(signed: bool, alpha: f64, bits: u32) -> QuantizerState {
    let (role, s) = if signed {
        (Role::Weight, Signedness::Signed)
    } else {
        (Role::Activation, Signedness::Unsigned)
    };
    let cfg = QuantizerConfig::new(role, s, Granularity::PerTensor, QuantMode::Hard, 2, 8).unwrap();
    QuantizerState::new(QuantizerId(0), cfg, vec![alpha], bits as f64, 1).unwrap()
}

fn weights(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-3.0f64..3.0).prop_map(|e| 10f64.powf(e)), 1..=max_len)
}

proptest! {
    #[test]
    fn quantizer_output_is_a_fixed_point(
        signed in any::<bool>(),
        alpha in 0.01f64..100.0,
        bits in 2u32..=8,
        xs in prop::collection::vec(-200.0f64..200.0, 1..32),
    ) {
        let q = hard(signed, alpha, bits);
        let x = Tensor::from_vec(xs);
        let y = quantize(&x, &q).unwrap();
        prop_assert_eq!(quantize(&y, &q).unwrap(), y);
    }

    #[test]
    fn quantizer_stays_within_range_and_half_step(
        signed in any::<bool>(),
        alpha in 0.01f64..100.0,
        bits in 2u32..=8,
        xs in prop::collection::vec(-200.0f64..200.0, 1..32),
    ) {
        let q = hard(signed, alpha, bits);
        let delta = q.step_size().unwrap()[0];
        let (lo, hi) = q.grid_limits();
        let y = quantize(&Tensor::from_vec(xs.clone()), &q).unwrap();
        for (&x, &v) in xs.iter().zip(y.data()) {
            prop_assert!(v >= lo * delta && v <= hi * delta * (1.0 + 1e-12));
            let clipped = x.clamp(lo * delta, hi * delta);
            prop_assert!((v - clipped).abs() <= 0.5 * delta * (1.0 + 1e-9));
        }
    }

    #[test]
    fn quantizer_is_monotone(
        signed in any::<bool>(),
        alpha in 0.01f64..100.0,
        bits in 2u32..=8,
        mut xs in prop::collection::vec(-200.0f64..200.0, 2..32),
    ) {
        xs.sort_by(f64::total_cmp);
        let q = hard(signed, alpha, bits);
        let y = quantize(&Tensor::from_vec(xs), &q).unwrap();
        prop_assert!(y.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn greedy_is_feasible_and_beats_uniform(w in weights(12), beta in 2.0f64..=8.0) {
        let p = AllocationProblem::from_weights(w).unwrap();
        let c = ResourceConstraint::avg(beta, 2, 8).unwrap();
        let g = greedy_integer(&p, &c).unwrap();
        let sum: u64 = int_bits(&g).iter().sum();
        prop_assert!(sum_within_budget(sum, p.len() as u64, beta));
        let uniform = BitAllocation::uniform(p.ids.clone(), beta.floor());
        prop_assert!(objective(&g, &p).unwrap() <= objective(&uniform, &p).unwrap());
    }

    #[test]
    fn greedy_ignores_weight_scale(w in weights(10), beta in 2.0f64..=8.0, c in 0.01f64..100.0) {
        let p = AllocationProblem::from_weights(w.clone()).unwrap();
        let scaled = AllocationProblem::from_weights(w.iter().map(|x| x * c).collect()).unwrap();
        let con = ResourceConstraint::avg(beta, 2, 8).unwrap();
        let a = greedy_integer(&p, &con).unwrap();
        let b = greedy_integer(&scaled, &con).unwrap();
        // scaling can only flip exact-tie decisions, which leave the objective unchanged
        let (oa, ob) = (objective(&a, &p).unwrap(), objective(&b, &p).unwrap());
        prop_assert!((oa - ob).abs() <= 1e-12 * oa.max(ob));
    }

    #[test]
    fn relaxation_bounds_integer_solutions(w in weights(10), beta in 2.0f64..8.0) {
        let p = AllocationProblem::from_weights(w).unwrap();
        let c = ResourceConstraint::avg(beta, 2, 8).unwrap();
        let frac = fractional_solve(&p, &c).unwrap();
        prop_assert!(satisfies(&frac, &p, &c, 1e-9));
        let rounded = round_to_integer(&frac, &p, &c).unwrap();
        prop_assert!(satisfies(&rounded, &p, &c, 0.0));
        let g = greedy_integer(&p, &c).unwrap();
        let f = objective_oracle(&p.weights, &frac.bits);
        prop_assert!(f <= objective_oracle(&p.weights, &g.bits) * (1.0 + 1e-12));
        prop_assert!(f <= objective_oracle(&p.weights, &rounded.bits) * (1.0 + 1e-12));
    }

    #[test]
    fn ema_stays_between_observations(gamma in 0.01f64..=1.0, obs in prop::collection::vec(0.0f64..1e6, 1..20)) {
        let mut est = SensitivityEstimator::new(gamma, 1).unwrap();
        for &v in &obs {
            est.observe(&[(QuantizerId(0), vec![v])]).unwrap();
        }
        let s = est.state(QuantizerId(0)).unwrap()[0];
        let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = obs.iter().copied().fold(0.0, f64::max);
        prop_assert!(s >= lo * (1.0 - 1e-12) && s <= hi * (1.0 + 1e-12));
    }
}
