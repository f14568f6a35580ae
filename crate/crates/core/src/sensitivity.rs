//! Quantization sensitivities.
//!
//! The working statistic is the squared gradient of the full-precision loss,
//! taken at parameters clipped to each quantizer's range, and smoothed across
//! probes with an exponential moving average. For weights the EMA runs on
//! per-channel sums of squared gradients; range weighting is applied late, in
//! [`snapshot`], with the ranges current at that moment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alloc::AllocationProblem;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::quant::{Granularity, QuantizerId, QuantizerState, Role};

/// Default EMA momentum.
pub const DEFAULT_GAMMA: f64 = 0.9;
/// Default number of iterations between probes.
pub const DEFAULT_PERIOD: usize = 2;
/// Default base step for [`hessian_diag_fd`].
pub const FD_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// A (clipped) parameter tensor; gradients are squared elementwise.
    Parameter,
    /// An activation `[batch, ...]`; squared per-sample gradients are summed
    /// over features and averaged over the batch. The loss must be a batch mean.
    Activation { batch_size: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeTarget {
    pub quantizer: QuantizerId,
    pub var: Var,
    pub kind: TargetKind,
}

/// Graph built by a model for one sensitivity probe.
#[derive(Clone, Debug)]
pub struct ProbeGraph {
    pub loss: Var,
    pub targets: Vec<ProbeTarget>,
}

/// A model that can expose its clipped full-precision loss for probing.
pub trait SensitivityProbe {
    type Batch: ?Sized;

    fn quantizers(&self) -> &[QuantizerState];

    /// Records the full-precision loss, with parameters clipped to their
    /// quantizer ranges and no rounding or noise, and one target per quantizer.
    fn probe_graph(&self, tape: &mut Tape, batch: &Self::Batch) -> Result<ProbeGraph>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityEstimator {
    gamma: f64,
    period: usize,
    states: BTreeMap<QuantizerId, Vec<f64>>,
    observations: u64,
}

impl SensitivityEstimator {
    pub fn new(gamma: f64, period: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::contract(format!(
                "EMA momentum {gamma} must lie in (0, 1]"
            )));
        }
        if period == 0 {
            return Err(Error::contract("sensitivity period must be positive"));
        }
        Ok(Self {
            gamma,
            period,
            states: BTreeMap::new(),
            observations: 0,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn should_update(&self, iteration: usize) -> bool {
        iteration.is_multiple_of(self.period)
    }

    /// Number of probes folded in so far.
    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn state(&self, id: QuantizerId) -> Option<&[f64]> {
        self.states.get(&id).map(Vec::as_slice)
    }

    /// Folds one probe into the EMA. The batch of observations is checked
    /// first; on any non-finite or negative value nothing is updated.
    pub fn observe(&mut self, observations: &[(QuantizerId, Vec<f64>)]) -> Result<()> {
        for (id, values) in observations {
            if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::numeric(format!(
                    "non-finite sensitivity for quantizer {id}"
                )));
            }
            if let Some(prev) = self.states.get(id) {
                if prev.len() != values.len() {
                    return Err(Error::contract(format!(
                        "quantizer {id}: sensitivity length changed from {} to {}",
                        prev.len(),
                        values.len()
                    )));
                }
            }
        }
        for (id, values) in observations {
            match self.states.get_mut(id) {
                None => {
                    self.states.insert(*id, values.clone());
                }
                Some(prev) => {
                    for (p, v) in prev.iter_mut().zip(values) {
                        *p = self.gamma * v + (1.0 - self.gamma) * *p;
                    }
                }
            }
        }
        self.observations += 1;
        Ok(())
    }
}

/// Runs one probe and reduces the gradients of the selected roles.
pub fn measure<M: SensitivityProbe + ?Sized>(
    model: &M,
    batch: &M::Batch,
    roles: &[Role],
) -> Result<Vec<(QuantizerId, Vec<f64>)>> {
    let mut tape = Tape::new();
    let graph = model.probe_graph(&mut tape, batch)?;
    tape.backward(graph.loss)?;
    let quantizers = model.quantizers();
    let mut out = Vec::new();
    for target in &graph.targets {
        let state = quantizers
            .iter()
            .find(|q| q.id == target.quantizer)
            .ok_or_else(|| {
                Error::contract(format!(
                    "probe target {} has no quantizer",
                    target.quantizer
                ))
            })?;
        if !roles.contains(&state.config.role) {
            continue;
        }
        let grad = tape.grad(target.var).ok_or_else(|| {
            Error::contract(format!("probe target {} is not tracked", target.quantizer))
        })?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient for quantizer {}",
                state.id
            )));
        }
        let values = match target.kind {
            TargetKind::Parameter => {
                let cols = tape.value(target.var).last_dim();
                let channels = match state.config.granularity {
                    Granularity::PerTensor => 1,
                    Granularity::PerChannel => state.alpha.len(),
                };
                let mut sums = vec![0.0; channels];
                for (i, g) in grad.iter().enumerate() {
                    sums[if channels == 1 { 0 } else { i % cols }] += g * g;
                }
                sums
            }
            TargetKind::Activation { batch_size } => {
                // the loss is a batch mean, so per-sample gradients are batch_size * grad
                let n = batch_size as f64;
                let total: f64 = grad.iter().map(|g| (n * g) * (n * g)).sum();
                vec![total / n]
            }
        };
        out.push((state.id, values));
    }
    Ok(out)
}

/// Probes parameter sensitivities and folds them into `estimator`.
pub fn fit_update<M: SensitivityProbe + ?Sized>(
    estimator: &mut SensitivityEstimator,
    model: &M,
    batch: &M::Batch,
) -> Result<()> {
    let obs = measure(model, batch, &[Role::Weight])?;
    estimator.observe(&obs)
}

/// Probes activation sensitivities and folds them into `estimator`.
pub fn activation_fit_update<M: SensitivityProbe + ?Sized>(
    estimator: &mut SensitivityEstimator,
    model: &M,
    batch: &M::Batch,
) -> Result<()> {
    let obs = measure(model, batch, &[Role::Activation])?;
    estimator.observe(&obs)
}

/// Parameter and activation sensitivities from a single probe.
pub fn fit_update_all<M: SensitivityProbe + ?Sized>(
    estimator: &mut SensitivityEstimator,
    model: &M,
    batch: &M::Batch,
) -> Result<()> {
    let obs = measure(model, batch, &[Role::Weight, Role::Activation])?;
    estimator.observe(&obs)
}

/// Range-weighted per-quantizer sensitivities at one point in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySnapshot {
    pub iteration: usize,
    pub ids: Vec<QuantizerId>,
    pub roles: Vec<Role>,
    /// `A_q = sum_c S_{q,c} * alpha_{q,c}^2`.
    pub weights: Vec<f64>,
    pub elements: Vec<u64>,
}

impl SensitivitySnapshot {
    pub fn problem(&self) -> Result<AllocationProblem> {
        AllocationProblem::new(
            self.ids.clone(),
            self.weights.clone(),
            self.roles.clone(),
            self.elements.clone(),
        )
    }

    pub fn weight_of(&self, id: QuantizerId) -> Option<f64> {
        self.ids
            .iter()
            .position(|&q| q == id)
            .map(|i| self.weights[i])
    }
}

/// Combines the EMA state with the current ranges. Quantizers are reported in
/// ascending id order.
pub fn snapshot(
    estimator: &SensitivityEstimator,
    quantizers: &[QuantizerState],
    iteration: usize,
) -> Result<SensitivitySnapshot> {
    let mut sorted: Vec<&QuantizerState> = quantizers.iter().collect();
    sorted.sort_by_key(|q| q.id);
    let mut snap = SensitivitySnapshot {
        iteration,
        ids: Vec::new(),
        roles: Vec::new(),
        weights: Vec::new(),
        elements: Vec::new(),
    };
    for q in sorted {
        let s = estimator.state(q.id).ok_or_else(|| {
            Error::contract(format!(
                "quantizer {} has no sensitivity observation yet",
                q.id
            ))
        })?;
        let weight = if s.len() == q.alpha.len() {
            s.iter().zip(&q.alpha).map(|(s, a)| s * a * a).sum()
        } else if s.len() == 1 {
            s[0] * q.alpha.iter().map(|a| a * a).sum::<f64>() / q.alpha.len() as f64
        } else {
            return Err(Error::contract(format!(
                "quantizer {}: {} sensitivity channels for {} ranges",
                q.id,
                s.len(),
                q.alpha.len()
            )));
        };
        snap.ids.push(q.id);
        snap.roles.push(q.config.role);
        snap.weights.push(weight);
        snap.elements.push(q.numel as u64);
    }
    Ok(snap)
}

/// Central finite differences of a gradient function along each coordinate:
/// `h_i = [g_i(theta + s e_i) - g_i(theta - s e_i)] / (2 s)` with
/// `s = epsilon * (1 + |theta_i|)`.
pub fn hessian_diag_fd<G>(grad: G, theta: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    hessian_diag_fd_with(Exec::default(), grad, theta, epsilon)
}

pub fn hessian_diag_fd_with<G>(exec: Exec, grad: G, theta: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    if !(epsilon > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step {epsilon} must be positive"
        )));
    }
    exec.map_range(theta.len(), |i| {
        let step = epsilon * (1.0 + theta[i].abs());
        let mut point = theta.to_vec();
        point[i] = theta[i] + step;
        let plus = grad(&point)?;
        point[i] = theta[i] - step;
        let minus = grad(&point)?;
        let h = (plus[i] - minus[i]) / (2.0 * step);
        if h.is_finite() {
            Ok(h)
        } else {
            Err(Error::numeric(format!(
                "non-finite curvature at coordinate {i}"
            )))
        }
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::quant::{QuantMode, QuantizerConfig, Signedness};

    /// Scalar model with loss `theta^2`.
    struct Square {
        theta: f64,
        quantizers: Vec<QuantizerState>,
    }

    impl Square {
        fn new(theta: f64, alpha: f64) -> Self {
            let cfg = QuantizerConfig::new(
                Role::Weight,
                Signedness::Signed,
                Granularity::PerTensor,
                QuantMode::Hard,
                2,
                8,
            )
            .unwrap();
            let q = QuantizerState::new(QuantizerId(0), cfg, vec![alpha], 4.0, 1).unwrap();
            Self {
                theta,
                quantizers: vec![q],
            }
        }
    }

    impl SensitivityProbe for Square {
        type Batch = ();
        fn quantizers(&self) -> &[QuantizerState] {
            &self.quantizers
        }
        fn probe_graph(&self, tape: &mut Tape, _: &()) -> Result<ProbeGraph> {
            let clipped =
                crate::quant::clip_params(&Tensor::scalar(self.theta), &self.quantizers[0])?;
            let t = tape.leaf(clipped);
            let loss = tape.mul(t, t)?;
            Ok(ProbeGraph {
                loss,
                targets: vec![ProbeTarget {
                    quantizer: QuantizerId(0),
                    var: t,
                    kind: TargetKind::Parameter,
                }],
            })
        }
    }

    /// Activation `z` feeding `loss = mean_n (scale * z_n)^2`.
    struct Chain {
        z: Vec<f64>,
        scale: f64,
        quantizers: Vec<QuantizerState>,
    }

    impl Chain {
        fn new(z: Vec<f64>, scale: f64) -> Self {
            let cfg = QuantizerConfig::new(
                Role::Activation,
                Signedness::Unsigned,
                Granularity::PerTensor,
                QuantMode::Hard,
                2,
                8,
            )
            .unwrap();
            let q = QuantizerState::new(QuantizerId(1), cfg, vec![100.0], 4.0, 1).unwrap();
            Self {
                z,
                scale,
                quantizers: vec![q],
            }
        }
    }

    impl SensitivityProbe for Chain {
        type Batch = ();
        fn quantizers(&self) -> &[QuantizerState] {
            &self.quantizers
        }
        fn probe_graph(&self, tape: &mut Tape, _: &()) -> Result<ProbeGraph> {
            let n = self.z.len();
            let z = tape.leaf(Tensor::matrix(n, 1, self.z.clone()));
            let y = tape.scale(z, self.scale)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.mean(sq)?;
            Ok(ProbeGraph {
                loss,
                targets: vec![ProbeTarget {
                    quantizer: QuantizerId(1),
                    var: z,
                    kind: TargetKind::Activation { batch_size: n },
                }],
            })
        }
    }

    #[test]
    fn first_observation_is_squared_gradient() {
        let model = Square::new(3.0, 10.0);
        let mut est = SensitivityEstimator::new(0.9, 2).unwrap();
        fit_update(&mut est, &model, &()).unwrap();
        assert_eq!(est.state(QuantizerId(0)).unwrap(), &[36.0]);
    }

    #[test]
    fn ema_arithmetic() {
        let mut est = SensitivityEstimator::new(0.9, 1).unwrap();
        est.observe(&[(QuantizerId(0), vec![10.0])]).unwrap();
        est.observe(&[(QuantizerId(0), vec![20.0])]).unwrap();
        assert!((est.state(QuantizerId(0)).unwrap()[0] - 19.0).abs() < 1e-12);
    }

    #[test]
    fn unit_gamma_keeps_latest() {
        let mut est = SensitivityEstimator::new(1.0, 1).unwrap();
        for v in [3.0, 7.0, 0.5] {
            est.observe(&[(QuantizerId(2), vec![v])]).unwrap();
            assert_eq!(est.state(QuantizerId(2)).unwrap(), &[v]);
        }
    }

    #[test]
    fn non_finite_observation_leaves_state_untouched() {
        let mut est = SensitivityEstimator::new(0.5, 1).unwrap();
        est.observe(&[(QuantizerId(0), vec![1.0]), (QuantizerId(1), vec![2.0])])
            .unwrap();
        let before = est.clone();
        let r = est.observe(&[
            (QuantizerId(0), vec![4.0]),
            (QuantizerId(1), vec![f64::NAN]),
        ]);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(est, before);
    }

    #[test]
    fn clipped_gradient_uses_range() {
        // theta = 3 clipped to alpha = 2: gradient 4, squared 16
        let model = Square::new(3.0, 2.0);
        let mut est = SensitivityEstimator::new(0.9, 2).unwrap();
        fit_update(&mut est, &model, &()).unwrap();
        assert_eq!(est.state(QuantizerId(0)).unwrap(), &[16.0]);
    }

    #[test]
    fn activation_sensitivity_examples() {
        let mut est = SensitivityEstimator::new(1.0, 1).unwrap();
        activation_fit_update(&mut est, &Chain::new(vec![2.0], 1.0), &()).unwrap();
        assert_eq!(est.state(QuantizerId(1)).unwrap(), &[16.0]);

        activation_fit_update(&mut est, &Chain::new(vec![2.0, 2.0], 1.0), &()).unwrap();
        assert_eq!(est.state(QuantizerId(1)).unwrap(), &[16.0]);
    }

    #[test]
    fn activation_chain_rule_factor() {
        // y = 2z feeding loss y^2: dL/dz = 2 dL/dy, so the z sensitivity is 4x the y sensitivity
        let mut est = SensitivityEstimator::new(1.0, 1).unwrap();
        activation_fit_update(&mut est, &Chain::new(vec![0.7], 2.0), &()).unwrap();
        let wrt_z = est.state(QuantizerId(1)).unwrap()[0];
        activation_fit_update(&mut est, &Chain::new(vec![1.4], 1.0), &()).unwrap();
        let wrt_y = est.state(QuantizerId(1)).unwrap()[0];
        assert!((wrt_z - 4.0 * wrt_y).abs() < 1e-12);
    }

    #[test]
    fn snapshot_weights_by_squared_range() {
        let cfg = QuantizerConfig::new(
            Role::Weight,
            Signedness::Signed,
            Granularity::PerTensor,
            QuantMode::Hard,
            2,
            8,
        )
        .unwrap();
        let q = QuantizerState::new(QuantizerId(0), cfg, vec![2.0], 4.0, 2).unwrap();
        let mut est = SensitivityEstimator::new(1.0, 1).unwrap();
        est.observe(&[(QuantizerId(0), vec![1.0 + 4.0])]).unwrap();
        let s = snapshot(&est, std::slice::from_ref(&q), 7).unwrap();
        assert_eq!(s.weights, vec![20.0]);
        assert_eq!(s.elements, vec![2]);
        assert_eq!(s.iteration, 7);

        let mut doubled = q;
        doubled.alpha = vec![4.0];
        assert_eq!(snapshot(&est, &[doubled], 7).unwrap().weights, vec![80.0]);

        let per_channel = QuantizerConfig::new(
            Role::Weight,
            Signedness::Signed,
            Granularity::PerChannel,
            QuantMode::Hard,
            2,
            8,
        )
        .unwrap();
        let q = QuantizerState::new(QuantizerId(3), per_channel, vec![1.0, 2.0], 4.0, 6).unwrap();
        est.observe(&[(QuantizerId(3), vec![3.0, 5.0])]).unwrap();
        let s = snapshot(&est, &[q], 0).unwrap();
        assert_eq!(s.weights, vec![23.0]);
    }

    #[test]
    fn snapshot_requires_observation() {
        let model = Square::new(1.0, 1.0);
        let est = SensitivityEstimator::new(0.9, 2).unwrap();
        match snapshot(&est, model.quantizers(), 0) {
            Err(Error::Contract(msg)) => assert!(msg.contains("quantizer 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fd_hessian_examples() {
        let h = hessian_diag_fd(|t| Ok(vec![3.0 * t[0]]), &[1.7], FD_EPSILON).unwrap();
        assert!((h[0] - 3.0).abs() < 1e-4);
        let h = hessian_diag_fd(|t| Ok(vec![t[1], t[0]]), &[0.3, -2.0], FD_EPSILON).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn estimator_validation() {
        assert!(SensitivityEstimator::new(0.0, 2).is_err());
        assert!(SensitivityEstimator::new(1.1, 2).is_err());
        assert!(SensitivityEstimator::new(0.9, 0).is_err());
        let est = SensitivityEstimator::new(DEFAULT_GAMMA, DEFAULT_PERIOD).unwrap();
        assert!(est.should_update(0) && !est.should_update(1) && est.should_update(4));
    }
}
