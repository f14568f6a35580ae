//! Simulated uniform quantizers with a zero zero-point.
//!
//! Hard quantization computes `delta * clamp(round(x / delta), l(b), u(b))` with
//! `delta = alpha / u(b)`. The noise variant replaces rounding with additive
//! `U[-1/2, 1/2]` noise on the integer scale, which makes fractional bitwidths
//! meaningful. Both are differentiable on a [`Tape`]: the input gradient is
//! straight-through inside the clamp range and the range gradient follows from
//! the chain rule through `delta` with rounding treated as the identity.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradPolicy, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound applied to every learned range.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Number of candidate ranges scanned by [`mse_range_init`].
pub const MSE_GRID_POINTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantizerId(pub u32);

impl fmt::Display for QuantizerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Activation,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Weight => "weight",
            Role::Activation => "activation",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signedness {
    Signed,
    Unsigned,
}

/// Per-channel ranges index the trailing axis of the quantized tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Round-to-nearest with straight-through gradients.
    #[default]
    Hard,
    /// Pseudo-quantization noise.
    Pqn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub signedness: Signedness,
    pub granularity: Granularity,
    pub mode: QuantMode,
    pub b_min: u32,
    pub b_max: u32,
    pub role: Role,
}

impl QuantizerConfig {
    pub fn new(
        role: Role,
        signedness: Signedness,
        granularity: Granularity,
        mode: QuantMode,
        b_min: u32,
        b_max: u32,
    ) -> Result<Self> {
        if b_min < 1 || b_min > b_max {
            return Err(Error::contract(format!(
                "bit domain [{b_min}, {b_max}] is invalid"
            )));
        }
        if granularity == Granularity::PerChannel && role != Role::Weight {
            return Err(Error::contract(
                "per-channel ranges are only supported for weights",
            ));
        }
        if signedness == Signedness::Signed && b_min < 2 {
            return Err(Error::contract("signed quantizers need at least 2 bits"));
        }
        Ok(Self {
            signedness,
            granularity,
            mode,
            b_min,
            b_max,
            role,
        })
    }

    /// Integer clamp limits `(l(b), u(b))`.
    pub fn grid_limits(&self, bits: f64) -> (f64, f64) {
        grid_limits(self.signedness, bits)
    }
}

pub fn grid_limits(signedness: Signedness, bits: f64) -> (f64, f64) {
    match signedness {
        Signedness::Unsigned => (0.0, bits.exp2() - 1.0),
        Signedness::Signed => {
            let u = (bits - 1.0).exp2() - 1.0;
            (-u, u)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub id: QuantizerId,
    pub config: QuantizerConfig,
    /// One entry for per-tensor ranges, one per trailing-axis channel otherwise.
    pub alpha: Vec<f64>,
    pub bitwidth: f64,
    /// Elements covered by this quantizer (per sample for activations).
    pub numel: usize,
}

impl QuantizerState {
    pub fn new(
        id: QuantizerId,
        config: QuantizerConfig,
        alpha: Vec<f64>,
        bitwidth: f64,
        numel: usize,
    ) -> Result<Self> {
        let state = Self {
            id,
            config,
            alpha,
            bitwidth,
            numel,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::contract(format!(
                "quantizer {}: range must be positive, got {:?}",
                self.id, self.alpha
            )));
        }
        if self.config.granularity == Granularity::PerTensor && self.alpha.len() != 1 {
            return Err(Error::contract(format!(
                "quantizer {}: per-tensor range must have one entry",
                self.id
            )));
        }
        self.check_bits(self.bitwidth)
    }

    fn check_bits(&self, b: f64) -> Result<()> {
        let (lo, hi) = (self.config.b_min as f64, self.config.b_max as f64);
        if !(b >= lo && b <= hi) {
            return Err(Error::contract(format!(
                "quantizer {}: bitwidth {b} outside [{lo}, {hi}]",
                self.id
            )));
        }
        if self.config.mode == QuantMode::Hard && b.fract() != 0.0 {
            return Err(Error::contract(format!(
                "quantizer {}: fractional bitwidth {b} needs noise mode",
                self.id
            )));
        }
        Ok(())
    }

    pub fn set_bitwidth(&mut self, b: f64) -> Result<()> {
        self.check_bits(b)?;
        self.bitwidth = b;
        Ok(())
    }

    pub fn set_mode(&mut self, mode: QuantMode) -> Result<()> {
        if mode == QuantMode::Hard && self.bitwidth.fract() != 0.0 {
            return Err(Error::contract(format!(
                "quantizer {}: cannot switch to hard mode at fractional bitwidth {}",
                self.id, self.bitwidth
            )));
        }
        self.config.mode = mode;
        Ok(())
    }

    pub fn grid_limits(&self) -> (f64, f64) {
        self.config.grid_limits(self.bitwidth)
    }

    /// Step size per range entry.
    pub fn step_size(&self) -> Result<Vec<f64>> {
        step_size(&self.alpha, self.bitwidth, self.config.signedness)
    }

    pub fn alpha_mean(&self) -> f64 {
        self.alpha.iter().sum::<f64>() / self.alpha.len() as f64
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if self.alpha.len() > 1 && self.alpha.len() != x.last_dim() {
            return Err(Error::Shape {
                op: "quantize",
                lhs: x.shape().to_vec(),
                rhs: vec![self.alpha.len()],
            });
        }
        Ok(())
    }

    fn channel(&self, i: usize, cols: usize) -> usize {
        if self.alpha.len() == 1 {
            0
        } else {
            i % cols
        }
    }
}

/// `alpha / u(b)`: `2^b - 1` levels above zero for unsigned grids,
/// `2^(b-1) - 1` for the symmetric signed grid.
pub fn step_size(alpha: &[f64], bits: f64, signedness: Signedness) -> Result<Vec<f64>> {
    let (_, u) = grid_limits(signedness, bits);
    if !(bits > 0.0) || !(u > 0.0) {
        return Err(Error::contract(format!(
            "step size undefined at bitwidth {bits}"
        )));
    }
    alpha
        .iter()
        .map(|&a| {
            if a > 0.0 {
                Ok(a / u)
            } else {
                Err(Error::contract(format!(
                    "step size needs a positive range, got {a}"
                )))
            }
        })
        .collect()
}

#[inline]
fn fake_quant(x: f64, delta: f64, lo: f64, hi: f64) -> f64 {
    (x / delta).round_ties_even().clamp(lo, hi) * delta
}

/// Hard quantization of a plain tensor.
pub fn quantize(x: &Tensor, state: &QuantizerState) -> Result<Tensor> {
    state.validate()?;
    if state.config.mode != QuantMode::Hard {
        return Err(Error::contract("quantize needs a hard-mode quantizer"));
    }
    state.check_input(x)?;
    let delta = state.step_size()?;
    let (lo, hi) = state.grid_limits();
    let cols = x.last_dim();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| fake_quant(v, delta[state.channel(i, cols)], lo, hi))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Noise quantization of a plain tensor; one uniform draw per element in order.
pub fn pqn_quantize<R: Rng + ?Sized>(
    x: &Tensor,
    state: &QuantizerState,
    rng: &mut R,
) -> Result<Tensor> {
    state.validate()?;
    if state.config.mode != QuantMode::Pqn {
        return Err(Error::contract("pqn_quantize needs a noise-mode quantizer"));
    }
    state.check_input(x)?;
    let delta = state.step_size()?;
    let (lo, hi) = state.grid_limits();
    let cols = x.last_dim();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = delta[state.channel(i, cols)];
            let eps = rng.random::<f64>() - 0.5;
            (v / d + eps).clamp(lo, hi) * d
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Records the quantizer on `tape` for input `x` and range leaf `alpha`.
///
/// Hard mode rounds with a straight-through estimator. Noise mode draws fresh
/// noise from `rng`, which must then be `Some`.
pub fn quantize_on<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    state: &QuantizerState,
    rng: Option<&mut R>,
) -> Result<Var> {
    state.validate()?;
    state.check_input(tape.value(x))?;
    let (lo, hi) = state.grid_limits();
    let delta = tape.div_scalar(alpha, hi)?;
    let scaled = tape.div(x, delta)?;
    let level = match state.config.mode {
        QuantMode::Hard => tape.round(scaled, GradPolicy::StraightThrough)?,
        QuantMode::Pqn => {
            let rng =
                rng.ok_or_else(|| Error::contract("noise quantizer needs a random source"))?;
            tape.add_uniform_noise(scaled, rng)?
        }
    };
    let clamped = tape.clamp(level, lo, hi, GradPolicy::StraightThrough)?;
    tape.mul(clamped, delta)
}

/// Noise quantizer on the tape with a frozen noise realization.
pub fn pqn_quantize_fixed(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    state: &QuantizerState,
    noise: Vec<f64>,
) -> Result<Var> {
    state.validate()?;
    let (lo, hi) = state.grid_limits();
    let delta = tape.div_scalar(alpha, hi)?;
    let scaled = tape.div(x, delta)?;
    let noisy = tape.add_fixed_noise(scaled, noise)?;
    let clamped = tape.clamp(noisy, lo, hi, GradPolicy::StraightThrough)?;
    tape.mul(clamped, delta)
}

/// Real-valued representable interval for range `alpha`.
pub fn clip_bounds(signedness: Signedness, alpha: f64) -> (f64, f64) {
    match signedness {
        Signedness::Unsigned => (0.0, alpha),
        Signedness::Signed => (-alpha, alpha),
    }
}

/// Clamps `theta` to the representable range without rounding.
pub fn clip_params(theta: &Tensor, state: &QuantizerState) -> Result<Tensor> {
    state.check_input(theta)?;
    let cols = theta.last_dim();
    let data = theta
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lo, hi) =
                clip_bounds(state.config.signedness, state.alpha[state.channel(i, cols)]);
            v.clamp(lo, hi)
        })
        .collect();
    Tensor::new(theta.shape().to_vec(), data)
}

/// Range minimizing squared reconstruction error over the candidates
/// `alpha = c * max|x|` for `c` in `0.01, 0.02, ..., 1.00`. Per-channel configs
/// return one range per trailing-axis channel. Ties keep the smaller range.
pub fn mse_range_init(x: &Tensor, bitwidth: u32, config: &QuantizerConfig) -> Result<Vec<f64>> {
    if bitwidth < config.b_min || bitwidth > config.b_max {
        return Err(Error::contract(format!(
            "range init bitwidth {bitwidth} outside [{}, {}]",
            config.b_min, config.b_max
        )));
    }
    let bits = bitwidth as f64;
    let (lo, hi) = config.grid_limits(bits);
    let channels = match config.granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => x.last_dim(),
    };
    let cols = x.last_dim();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (i, &v) in x.data().iter().enumerate() {
        columns[if channels == 1 { 0 } else { i % cols }].push(v);
    }

    Ok(columns
        .iter()
        .map(|col| {
            let max_abs = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max_abs == 0.0 {
                return ALPHA_FLOOR;
            }
            let mut best = (f64::INFINITY, ALPHA_FLOOR);
            for k in 1..=MSE_GRID_POINTS {
                let alpha = (k as f64 / MSE_GRID_POINTS as f64) * max_abs;
                let delta = alpha / hi;
                let err: f64 = col
                    .iter()
                    .map(|&v| {
                        let d = v - fake_quant(v, delta, lo, hi);
                        d * d
                    })
                    .sum();
                if err < best.0 {
                    best = (err, alpha);
                }
            }
            best.1.max(ALPHA_FLOOR)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unsigned(alpha: f64, bits: f64, mode: QuantMode) -> QuantizerState {
        let cfg = QuantizerConfig::new(
            Role::Activation,
            Signedness::Unsigned,
            Granularity::PerTensor,
            mode,
            1,
            8,
        )
        .unwrap();
        QuantizerState::new(QuantizerId(0), cfg, vec![alpha], bits, 1).unwrap()
    }

    fn signed(alpha: Vec<f64>, bits: f64) -> QuantizerState {
        let gran = if alpha.len() > 1 {
            Granularity::PerChannel
        } else {
            Granularity::PerTensor
        };
        let cfg = QuantizerConfig::new(
            Role::Weight,
            Signedness::Signed,
            gran,
            QuantMode::Hard,
            2,
            8,
        )
        .unwrap();
        QuantizerState::new(QuantizerId(1), cfg, alpha, bits, 1).unwrap()
    }

    #[test]
    fn step_size_examples() {
        assert_eq!(
            unsigned(3.0, 2.0, QuantMode::Hard).step_size().unwrap(),
            vec![1.0]
        );
        assert_eq!(
            unsigned(1.0, 1.0, QuantMode::Hard).step_size().unwrap(),
            vec![1.0]
        );
        let d = unsigned(7.5, 3.0, QuantMode::Hard).step_size().unwrap()[0];
        assert!((d - 7.5 / 7.0).abs() < 1e-15);
        assert!((d - 1.0714).abs() < 1e-4);
        assert_eq!(signed(vec![3.0], 3.0).step_size().unwrap(), vec![1.0]);
    }

    #[test]
    fn step_size_rejects_bad_inputs() {
        assert!(step_size(&[1.0], 0.0, Signedness::Unsigned).is_err());
        assert!(step_size(&[0.0], 4.0, Signedness::Unsigned).is_err());
        assert!(step_size(&[1.0], 1.0, Signedness::Signed).is_err());
    }

    #[test]
    fn quantize_examples() {
        let q = unsigned(3.0, 2.0, QuantMode::Hard);
        let out = quantize(&Tensor::from_vec(vec![1.4, 5.0, -0.6]), &q).unwrap();
        assert_eq!(out.data(), &[1.0, 3.0, 0.0]);
    }

    #[test]
    fn quantize_rejects_fractional_hard_bits() {
        let mut q = unsigned(3.0, 2.0, QuantMode::Hard);
        q.bitwidth = 2.5;
        assert!(quantize(&Tensor::scalar(1.0), &q).is_err());
    }

    #[test]
    fn tape_quantizer_matches_plain_version() {
        let q = signed(vec![0.7, 1.3, 2.1], 3.0);
        let x = Tensor::matrix(2, 3, vec![-0.9, 0.2, 1.7, 0.33, -1.5, 2.5]);
        let plain = quantize(&x, &q).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let a = tape.leaf(Tensor::from_vec(q.alpha.clone()));
        let out = quantize_on::<ChaCha8Rng>(&mut tape, xv, a, &q, None).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }

    #[test]
    fn alpha_gradient_follows_lsq_rule() {
        // unsigned, alpha = 3, b = 2: delta = 1, u = 3
        let q = unsigned(3.0, 2.0, QuantMode::Hard);
        for (x, expected) in [(1.4, (1.0 - 1.4) / 3.0), (5.0, 3.0 / 3.0), (-0.6, 0.0)] {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::scalar(x));
            let a = tape.leaf(Tensor::scalar(3.0));
            let out = quantize_on::<ChaCha8Rng>(&mut tape, xv, a, &q, None).unwrap();
            tape.backward(out).unwrap();
            assert!((tape.grad(a).unwrap()[0] - expected).abs() < 1e-15, "x={x}");
            let input_grad = if (0.0..=3.0).contains(&x) { 1.0 } else { 0.0 };
            assert_eq!(tape.grad(xv).unwrap()[0], input_grad, "x={x}");
        }
    }

    #[test]
    fn pqn_noiseless_is_identity_inside_range() {
        let q = unsigned(3.0, 2.0, QuantMode::Pqn);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, 1.7, 2.9]));
        let a = tape.leaf(Tensor::scalar(3.0));
        let out = pqn_quantize_fixed(&mut tape, x, a, &q, vec![0.0; 3]).unwrap();
        for (o, e) in tape.value(out).data().iter().zip([0.3, 1.7, 2.9]) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn pqn_saturates_far_above_range() {
        let q = unsigned(3.0, 2.0, QuantMode::Pqn);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = pqn_quantize(&Tensor::from_vec(vec![100.0; 1000]), &q, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn pqn_plain_and_tape_draw_the_same_noise() {
        let q = unsigned(2.0, 3.5, QuantMode::Pqn);
        let x = Tensor::from_vec(vec![0.1, 0.9, 1.4, 1.99]);
        let plain = pqn_quantize(&x, &q, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let a = tape.leaf(Tensor::scalar(2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = quantize_on(&mut tape, xv, a, &q, Some(&mut rng)).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }

    #[test]
    fn clip_examples() {
        let q = unsigned(3.0, 2.0, QuantMode::Hard);
        let out = clip_params(&Tensor::from_vec(vec![-1.0, 0.5, 4.0]), &q).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 3.0]);
        let inside = Tensor::from_vec(vec![0.1, 2.9]);
        assert_eq!(clip_params(&inside, &q).unwrap(), inside);
        let s = signed(vec![2.0], 2.0);
        assert_eq!(
            clip_params(&Tensor::from_vec(vec![-3.0, 3.0]), &s)
                .unwrap()
                .data(),
            &[-2.0, 2.0]
        );
    }

    #[test]
    fn clip_is_per_channel() {
        let s = signed(vec![1.0, 2.0], 2.0);
        let out = clip_params(&Tensor::matrix(2, 2, vec![3.0, 3.0, -3.0, -1.5]), &s).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, -1.0, -1.5]);
    }

    #[test]
    fn mse_init_examples() {
        let cfg = unsigned(1.0, 2.0, QuantMode::Hard).config;
        let a = mse_range_init(&Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]), 2, &cfg).unwrap();
        assert_eq!(a, vec![3.0]);
        let a = mse_range_init(&Tensor::from_vec(vec![0.0, 10.0]), 2, &cfg).unwrap();
        assert_eq!(a, vec![10.0]);
        let a = mse_range_init(&Tensor::from_vec(vec![0.0; 5]), 2, &cfg).unwrap();
        assert_eq!(a, vec![1e-8]);
    }

    #[test]
    fn mse_init_matches_exhaustive_scan() {
        // oracle: evaluate every candidate independently and take the first minimum
        let cfg = unsigned(1.0, 3.0, QuantMode::Hard).config;
        let xs = vec![0.05, 0.4, 0.41, 0.9, 1.3, 2.2, 7.0];
        let got = mse_range_init(&Tensor::from_vec(xs.clone()), 3, &cfg).unwrap()[0];
        let errs: Vec<(f64, f64)> = (1..=100)
            .map(|k| {
                let alpha = k as f64 / 100.0 * 7.0;
                let st = unsigned(alpha, 3.0, QuantMode::Hard);
                let q = quantize(&Tensor::from_vec(xs.clone()), &st).unwrap();
                let e = xs.iter().zip(q.data()).map(|(a, b)| (a - b).powi(2)).sum();
                (e, alpha)
            })
            .collect();
        let min = errs.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
        let first = errs.iter().find(|e| e.0 == min).unwrap().1;
        assert_eq!(got, first);
    }

    #[test]
    fn set_bitwidth_rules() {
        let mut hard = unsigned(3.0, 2.0, QuantMode::Hard);
        hard.set_bitwidth(4.0).unwrap();
        assert_eq!(hard.step_size().unwrap(), vec![3.0 / 15.0]);
        assert!(hard.set_bitwidth(3.6).is_err());
        assert!(hard.set_bitwidth(9.0).is_err());
        assert_eq!(hard.bitwidth, 4.0);
        assert_eq!(hard.alpha, vec![3.0]);
        let mut pqn = unsigned(3.0, 2.0, QuantMode::Pqn);
        pqn.set_bitwidth(3.6).unwrap();
        assert_eq!(pqn.bitwidth, 3.6);
        assert!(pqn.set_mode(QuantMode::Hard).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(QuantizerConfig::new(
            Role::Activation,
            Signedness::Unsigned,
            Granularity::PerChannel,
            QuantMode::Hard,
            2,
            8
        )
        .is_err());
        assert!(QuantizerConfig::new(
            Role::Weight,
            Signedness::Unsigned,
            Granularity::PerTensor,
            QuantMode::Hard,
            0,
            8
        )
        .is_err());
    }
}
