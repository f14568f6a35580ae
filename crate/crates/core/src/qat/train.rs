use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{evaluate, Mlp, ModelSpec, QuantSetup};
use super::optim::{range_step, sgd_step};
use crate::alloc::{
    fractional_solve, greedy_integer, objective, round_to_integer, satisfies, AllocationProblem,
    BitAllocation, ResourceConstraint,
};
use crate::data::{Batch, BatchSampler, Split};
use crate::error::{Error, Result};
use crate::quant::{QuantMode, QuantizerId, Role};
use crate::sensitivity::{fit_update_all, snapshot, SensitivityEstimator, SensitivitySnapshot};

// independent ChaCha streams derived from the run seed
const STREAM_BATCHES: u64 = 0;
const STREAM_PROBES: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Relative slack for fractional allocations when re-checking the constraint.
const FRACTIONAL_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocatorKind {
    #[default]
    Greedy,
    Fractional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Main-loop iterations, both phases together.
    pub iterations: usize,
    /// Share of `iterations` spent in the reallocating phase.
    pub phase1_fraction: f64,
    /// Iterations between reallocations.
    pub realloc_period: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate for quantizer ranges.
    pub alpha_lr: f64,
    pub gamma: f64,
    pub sensitivity_period: usize,
    /// Quantizer mode during the reallocating phase.
    pub mode: QuantMode,
    pub constraint: ResourceConstraint,
    pub allocator: AllocatorKind,
    pub batch_size: usize,
    pub seed: u64,
    /// Full-precision iterations before quantizers are initialized.
    pub pretrain_iterations: usize,
    /// Sensitivity probes used by the one-shot allocation when there is no reallocating phase.
    pub calibration_batches: usize,
    /// Probe on batches from a separate stream instead of the training batch.
    pub separate_probe_batch: bool,
    /// Iterations between trajectory rows.
    pub log_interval: usize,
}

impl TrainConfig {
    /// Defaults for a desk-scale run under `constraint`.
    pub fn new(constraint: ResourceConstraint) -> Self {
        Self {
            iterations: 2000,
            phase1_fraction: 0.5,
            realloc_period: 50,
            lr: 0.05,
            momentum: 0.9,
            alpha_lr: 0.01,
            gamma: crate::sensitivity::DEFAULT_GAMMA,
            sensitivity_period: crate::sensitivity::DEFAULT_PERIOD,
            mode: QuantMode::Hard,
            constraint,
            allocator: AllocatorKind::Greedy,
            batch_size: 64,
            seed: 0,
            pretrain_iterations: 500,
            calibration_batches: 4,
            separate_probe_batch: false,
            log_interval: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.iterations", self.iterations),
            ("train.realloc_period", self.realloc_period),
            ("train.sensitivity_period", self.sensitivity_period),
            ("train.batch_size", self.batch_size),
            ("train.calibration_batches", self.calibration_batches),
            ("train.log_interval", self.log_interval),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return Err(Error::config("train.phase1_fraction", "must lie in [0, 1]"));
        }
        if self.realloc_period < self.sensitivity_period {
            return Err(Error::config(
                "train.realloc_period",
                format!(
                    "{} is shorter than train.sensitivity_period = {}",
                    self.realloc_period, self.sensitivity_period
                ),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.alpha_lr >= 0.0 && self.alpha_lr.is_finite()) {
            return Err(Error::config("train.alpha_lr", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("train.gamma", "must lie in (0, 1]"));
        }
        self.constraint.validate().map_err(|e| match e {
            Error::Constraint(msg) => Error::config("constraint", msg),
            e => e,
        })
    }

    /// Iterations in the reallocating phase.
    pub fn phase1_iterations(&self) -> usize {
        (self.iterations as f64 * self.phase1_fraction).round() as usize
    }

    /// Uniform starting bitwidths: the largest integer under each target.
    fn initial_bits(&self, role: Role) -> f64 {
        match self.constraint {
            ResourceConstraint::AvgBitwidth { beta, .. } => beta.floor(),
            ResourceConstraint::PerElementAvg {
                beta_weight,
                beta_act,
                ..
            } => match role {
                Role::Weight => beta_weight.floor(),
                Role::Activation => beta_act.floor(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: u8,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationEvent {
    pub iteration: usize,
    pub allocation: BitAllocation,
    pub snapshot: SensitivitySnapshot,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub quantizer_id: QuantizerId,
    pub role: Role,
    pub bitwidth: f64,
    pub sensitivity: Option<f64>,
    pub alpha_mean: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub iterations: Vec<IterationRecord>,
    pub allocations: Vec<AllocationEvent>,
    pub trajectory: Vec<TrajectoryRow>,
    pub final_allocation: BitAllocation,
    pub final_test_accuracy: f64,
    pub constraint: Option<ResourceConstraint>,
    /// Excluded from equality.
    pub wall_clock_secs: f64,
}

impl PartialEq for RunReport {
    fn eq(&self, other: &Self) -> bool {
        self.iterations == other.iterations
            && self.allocations == other.allocations
            && self.trajectory == other.trajectory
            && self.final_allocation == other.final_allocation
            && self.final_test_accuracy == other.final_test_accuracy
            && self.constraint == other.constraint
    }
}

impl RunReport {
    /// Number of quantizers whose bitwidth changed between consecutive allocation events.
    pub fn bit_changes(&self) -> Vec<usize> {
        self.allocations
            .windows(2)
            .map(|w| {
                w[0].allocation
                    .bits
                    .iter()
                    .zip(&w[1].allocation.bits)
                    .filter(|(a, b)| a != b)
                    .count()
            })
            .collect()
    }

    pub fn latest_snapshot(&self) -> Option<&SensitivitySnapshot> {
        self.allocations.last().map(|e| &e.snapshot)
    }
}

/// What a run does with bitwidths.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Schedule {
    Mixed,
    Fixed(u32),
    FullPrecision,
}

/// Mixed-precision training: a reallocating phase followed by fine-tuning at
/// frozen integer bitwidths. With `phase1_fraction = 0` the bitwidths are
/// allocated once from calibration probes before fine-tuning.
pub fn train(spec: &ModelSpec, config: &TrainConfig, data: &Split) -> Result<RunReport> {
    Run::new(spec, config, data, Schedule::Mixed)?.execute()
}

/// The same loop with every bitwidth pinned to `bits` and no allocator calls.
/// `None` disables quantization entirely.
pub fn fixed_precision_baseline(
    spec: &ModelSpec,
    config: &TrainConfig,
    bits: Option<u32>,
    data: &Split,
) -> Result<RunReport> {
    let schedule = match bits {
        Some(b) => Schedule::Fixed(b),
        None => Schedule::FullPrecision,
    };
    Run::new(spec, config, data, schedule)?.execute()
}

/// Sensitivities of the freshly initialized quantized model: warm-up, range
/// initialization and `calibration_batches` probes, with no quantized training.
pub fn probe_sensitivities(
    spec: &ModelSpec,
    config: &TrainConfig,
    data: &Split,
) -> Result<SensitivitySnapshot> {
    let mut run = Run::new(spec, config, data, Schedule::Mixed)?;
    run.prepare()?;
    run.calibrate()?;
    snapshot(&run.estimator, run.model.quantizers(), 0)
}

struct Velocity {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    alphas: Vec<Vec<f64>>,
}

struct Run<'a> {
    config: &'a TrainConfig,
    data: &'a Split,
    schedule: Schedule,
    model: Mlp,
    velocity: Velocity,
    estimator: SensitivityEstimator,
    sampler: BatchSampler,
    probes: BatchSampler,
    noise: ChaCha8Rng,
    report: RunReport,
    last_problem: Option<AllocationProblem>,
    started: Instant,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'a> Run<'a> {
    fn new(
        spec: &ModelSpec,
        config: &'a TrainConfig,
        data: &'a Split,
        schedule: Schedule,
    ) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if data.train.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        if data.train.dim != spec.widths[0] || data.train.classes > *spec.widths.last().unwrap() {
            return Err(Error::contract(format!(
                "model widths {:?} do not fit data with {} features and {} classes",
                spec.widths, data.train.dim, data.train.classes
            )));
        }
        let (b_min, b_max) = config.constraint.bounds();
        let setup = match schedule {
            Schedule::Mixed => QuantSetup {
                b_min,
                b_max,
                mode: config.mode,
                bits: b_min as f64,
                enabled: true,
            },
            Schedule::Fixed(b) => QuantSetup {
                b_min: b_min.min(b),
                b_max: b_max.max(b),
                mode: QuantMode::Hard,
                bits: b as f64,
                enabled: true,
            },
            Schedule::FullPrecision => QuantSetup {
                b_min,
                b_max,
                mode: QuantMode::Hard,
                bits: b_min as f64,
                enabled: false,
            },
        };
        let mut model = Mlp::new(spec, setup)?;
        if schedule == Schedule::Mixed {
            for q in model.quantizers_mut() {
                let b = config.initial_bits(q.config.role);
                q.set_bitwidth(b)?;
            }
        }
        let velocity = Velocity {
            weights: model
                .layers()
                .iter()
                .map(|l| vec![0.0; l.weight.len()])
                .collect(),
            biases: model
                .layers()
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
            alphas: model
                .quantizers()
                .iter()
                .map(|q| vec![0.0; q.alpha.len()])
                .collect(),
        };
        Ok(Self {
            config,
            data,
            schedule,
            velocity,
            estimator: SensitivityEstimator::new(config.gamma, config.sensitivity_period)?,
            sampler: BatchSampler::new(
                data.train.len(),
                config.batch_size,
                stream(config.seed, STREAM_BATCHES),
            )?,
            probes: BatchSampler::new(
                data.train.len(),
                config.batch_size,
                stream(config.seed, STREAM_PROBES),
            )?,
            noise: stream(config.seed, STREAM_NOISE),
            report: RunReport {
                iterations: Vec::new(),
                allocations: Vec::new(),
                trajectory: Vec::new(),
                final_allocation: model.current_allocation(),
                final_test_accuracy: 0.0,
                constraint: (schedule == Schedule::Mixed).then_some(config.constraint),
                wall_clock_secs: 0.0,
            },
            model,
            last_problem: None,
            started: Instant::now(),
        })
    }

    fn execute(mut self) -> Result<RunReport> {
        let total = self.config.iterations;
        let phase1 = match self.schedule {
            Schedule::Mixed => self.config.phase1_iterations(),
            _ => 0,
        };

        self.prepare()?;
        if self.schedule == Schedule::Mixed && phase1 == 0 {
            self.calibrate()?;
            self.reallocate(0, false)?;
        }

        for i in 0..total {
            let in_phase1 = i < phase1;
            if i == phase1 && self.schedule == Schedule::Mixed {
                self.freeze(i)?;
            }
            let batch = self.sampler.next_batch(&self.data.train)?;
            if in_phase1 {
                if self.estimator.should_update(i) {
                    if self.config.separate_probe_batch {
                        let probe = self.probes.next_batch(&self.data.train)?;
                        fit_update_all(&mut self.estimator, &self.model, &probe)?;
                    } else {
                        fit_update_all(&mut self.estimator, &self.model, &batch)?;
                    }
                }
                if i % self.config.realloc_period == 0 {
                    self.reallocate(i, self.config.mode == QuantMode::Pqn)?;
                }
            }
            let (loss, accuracy) = self.train_step(&batch)?;
            if !loss.is_finite() {
                return Err(self.diverged(i, loss));
            }
            self.report.iterations.push(IterationRecord {
                iteration: i,
                phase: if in_phase1 { 1 } else { 2 },
                loss,
                accuracy,
            });
            if i % self.config.log_interval == 0 || i + 1 == total {
                self.log_rows(i, loss, accuracy);
            }
        }
        if phase1 == total && self.schedule == Schedule::Mixed {
            self.freeze(total)?;
        }

        self.report.final_allocation = match self.schedule {
            Schedule::FullPrecision => BitAllocation::uniform(self.model.quantizer_ids(), 32.0),
            _ => self.model.current_allocation(),
        };
        self.report.final_test_accuracy = evaluate(&self.model, &self.data.test)?;
        self.report.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let changes = self.report.bit_changes();
        if !changes.is_empty() {
            info!("quantizers changed per reallocation: {changes:?}");
        }
        Ok(self.report)
    }

    /// Full-precision warm-up, then range initialization on one batch.
    fn prepare(&mut self) -> Result<()> {
        let enabled = self.model.quantization_enabled();
        self.model.set_quantization_enabled(false);
        for i in 0..self.config.pretrain_iterations {
            let batch = self.sampler.next_batch(&self.data.train)?;
            let (loss, _) = self.train_step(&batch)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "warm-up loss became {loss} at step {i}"
                )));
            }
        }
        self.model.set_quantization_enabled(enabled);
        if enabled {
            let calibration = self.sampler.next_batch(&self.data.train)?;
            self.model.init_ranges(&calibration)?;
        }
        Ok(())
    }

    fn calibrate(&mut self) -> Result<()> {
        for _ in 0..self.config.calibration_batches {
            let batch = self.probes.next_batch(&self.data.train)?;
            fit_update_all(&mut self.estimator, &self.model, &batch)?;
        }
        Ok(())
    }

    /// Snapshot, solve, apply. Fractional solutions are kept only when
    /// `fractional_ok` (noise mode); otherwise they are rounded.
    fn reallocate(&mut self, iteration: usize, fractional_ok: bool) -> Result<()> {
        let snap = snapshot(&self.estimator, self.model.quantizers(), iteration)?;
        let problem = snap.problem()?;
        let constraint = &self.config.constraint;
        let alloc = match self.config.allocator {
            AllocatorKind::Greedy => greedy_integer(&problem, constraint)?,
            AllocatorKind::Fractional => {
                let frac = fractional_solve(&problem, constraint)?;
                if fractional_ok {
                    frac
                } else {
                    round_to_integer(&frac, &problem, constraint)?
                }
            }
        };
        self.record_allocation(iteration, alloc, snap, problem)
    }

    fn record_allocation(
        &mut self,
        iteration: usize,
        alloc: BitAllocation,
        snap: SensitivitySnapshot,
        problem: AllocationProblem,
    ) -> Result<()> {
        if !satisfies(&alloc, &problem, &self.config.constraint, FRACTIONAL_SLACK) {
            return Err(Error::Constraint(format!(
                "allocation at iteration {iteration} violates the constraint: {:?}",
                alloc.bits
            )));
        }
        self.model.apply_allocation(&alloc)?;
        debug!("iteration {iteration}: bitwidths {:?}", alloc.bits);
        self.report.allocations.push(AllocationEvent {
            iteration,
            objective: objective(&alloc, &problem)?,
            allocation: alloc,
            snapshot: snap,
        });
        self.last_problem = Some(problem);
        Ok(())
    }

    /// Phase boundary: round any fractional bitwidths once and switch to hard mode.
    fn freeze(&mut self, iteration: usize) -> Result<()> {
        let current = self.model.current_allocation();
        if !current.integral {
            let problem = self.last_problem.clone().ok_or_else(|| {
                Error::contract("fractional bitwidths without an allocation event")
            })?;
            let rounded = round_to_integer(&current, &problem, &self.config.constraint)?;
            let snap = self
                .report
                .latest_snapshot()
                .cloned()
                .expect("event recorded with problem");
            self.record_allocation(iteration, rounded, snap, problem)?;
        }
        self.model.set_mode(QuantMode::Hard)
    }

    fn train_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let out = self.model.step(batch, Some(&mut self.noise))?;
        if !out.loss.is_finite() {
            return Ok((out.loss, out.accuracy));
        }
        let (lr, momentum, alpha_lr) = (self.config.lr, self.config.momentum, self.config.alpha_lr);
        let v = &mut self.velocity;
        for (l, layer) in self.model.layers_mut().iter_mut().enumerate() {
            sgd_step(
                layer.weight.data_mut(),
                &out.grads.weights[l],
                &mut v.weights[l],
                lr,
                momentum,
            )?;
            sgd_step(
                layer.bias.data_mut(),
                &out.grads.biases[l],
                &mut v.biases[l],
                lr,
                momentum,
            )?;
        }
        for (q, (state, grad)) in self
            .model
            .quantizers_mut()
            .iter_mut()
            .zip(&out.grads.alphas)
            .enumerate()
        {
            if let Some(g) = grad {
                range_step(&mut state.alpha, g, &mut v.alphas[q], alpha_lr, momentum)?;
            }
        }
        Ok((out.loss, out.accuracy))
    }

    fn log_rows(&mut self, iteration: usize, loss: f64, accuracy: f64) {
        let snap = if self.estimator.observations() > 0 {
            snapshot(&self.estimator, self.model.quantizers(), iteration).ok()
        } else {
            None
        };
        for q in self.model.quantizers() {
            self.report.trajectory.push(TrajectoryRow {
                iteration,
                quantizer_id: q.id,
                role: q.config.role,
                bitwidth: q.bitwidth,
                sensitivity: snap.as_ref().and_then(|s| s.weight_of(q.id)),
                alpha_mean: q.alpha_mean(),
                loss,
                accuracy: Some(accuracy),
            });
        }
    }

    fn diverged(mut self, iteration: usize, loss: f64) -> Error {
        self.report.final_allocation = self.model.current_allocation();
        self.report.wall_clock_secs = self.started.elapsed().as_secs_f64();
        Error::Diverged {
            iteration,
            msg: format!("loss became {loss}"),
            report: Box::new(self.report),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synthetic::two_moons;

    fn data(seed: u64) -> Split {
        Split {
            train: two_moons(256, 0.1, seed).unwrap(),
            test: two_moons(128, 0.1, seed + 1).unwrap(),
        }
    }

    fn spec() -> ModelSpec {
        ModelSpec {
            widths: vec![2, 16, 8, 2],
            seed: 3,
        }
    }

    fn config(beta: f64) -> TrainConfig {
        TrainConfig {
            iterations: 60,
            realloc_period: 10,
            pretrain_iterations: 20,
            batch_size: 32,
            log_interval: 10,
            ..TrainConfig::new(ResourceConstraint::avg(beta, 2, 8).unwrap())
        }
    }

    #[test]
    fn reallocation_schedule() {
        let r = train(&spec(), &config(3.0), &data(0)).unwrap();
        let at: Vec<usize> = r.allocations.iter().map(|e| e.iteration).collect();
        assert_eq!(at, vec![0, 10, 20]);
        assert_eq!(r.iterations.len(), 60);
        assert!(r.iterations[..30].iter().all(|it| it.phase == 1));
        assert!(r.iterations[30..].iter().all(|it| it.phase == 2));
        assert_eq!(r.final_allocation.average_bits(), 3.0);
        assert_eq!(r.trajectory.len(), 7 * 5);
    }

    #[test]
    fn long_period_gives_single_event() {
        let c = TrainConfig {
            realloc_period: 1000,
            ..config(3.0)
        };
        assert_eq!(train(&spec(), &c, &data(0)).unwrap().allocations.len(), 1);
    }

    #[test]
    fn zero_fraction_allocates_once() {
        let c = TrainConfig {
            phase1_fraction: 0.0,
            ..config(3.0)
        };
        let r = train(&spec(), &c, &data(0)).unwrap();
        assert_eq!(r.allocations.len(), 1);
        assert!(r.iterations.iter().all(|it| it.phase == 2));
    }

    #[test]
    fn pinned_constraint_matches_fixed_precision() {
        let c = TrainConfig {
            constraint: ResourceConstraint::avg(4.0, 4, 4).unwrap(),
            ..config(4.0)
        };
        let mixed = train(&spec(), &c, &data(1)).unwrap();
        let fixed = fixed_precision_baseline(&spec(), &c, Some(4), &data(1)).unwrap();
        let curve = |r: &RunReport| {
            r.iterations
                .iter()
                .map(|it| (it.loss, it.accuracy))
                .collect::<Vec<_>>()
        };
        assert_eq!(curve(&mixed), curve(&fixed));
        assert_eq!(mixed.final_test_accuracy, fixed.final_test_accuracy);
        assert_eq!(mixed.final_allocation, fixed.final_allocation);
    }

    #[test]
    fn same_seed_same_report() {
        let c = TrainConfig {
            mode: QuantMode::Pqn,
            allocator: AllocatorKind::Fractional,
            ..config(3.5)
        };
        let a = train(&spec(), &c, &data(2)).unwrap();
        let b = train(&spec(), &c, &data(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.final_allocation.integral);
        assert!(a.allocations.iter().any(|e| !e.allocation.integral));
    }

    #[test]
    fn disabled_quantizers_train_in_full_precision() {
        let r = fixed_precision_baseline(&spec(), &config(3.0), None, &data(0)).unwrap();
        assert!(r.allocations.is_empty());
        assert!(r.final_test_accuracy > 0.5);
    }

    #[test]
    fn config_ordering_rule() {
        let c = TrainConfig {
            realloc_period: 1,
            ..config(3.0)
        };
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.realloc_period"),
            other => panic!("{other:?}"),
        }
    }
}
