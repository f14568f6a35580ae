//! Oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use mpq::alloc::{AllocationProblem, BitAllocation};
use mpq::autodiff::{GradPolicy, Tape, Tensor, Var};
use mpq::data::{Batch, Dataset};
use mpq::quant::{
    Granularity, QuantMode, QuantizerConfig, QuantizerId, QuantizerState, Role, Signedness,
};
use mpq::sensitivity::{ProbeGraph, ProbeTarget, SensitivityProbe, TargetKind};
use mpq::Result;
use rand::Rng;

/// Exact test of `sum <= k * beta` for a finite positive double `beta`,
/// done in integers: `beta = m * 2^e` with an integer mantissa `m`.
pub fn sum_within_budget(sum: u64, k: u64, beta: f64) -> bool {
    let bits = beta.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    assert!(
        exp > 0 && exp < 0x7ff && beta > 0.0,
        "normal positive beta expected"
    );
    let m = (frac | (1u64 << 52)) as u128;
    let e = exp - 1075;
    // k * m * 2^e >= sum
    if e >= 0 {
        (k as u128 * m) << e >= sum as u128
    } else {
        k as u128 * m >= (sum as u128) << (-e)
    }
}

/// `k * beta` when it is an integer, decided exactly.
pub fn exact_product(k: u64, beta: f64) -> Option<u64> {
    let bits = beta.to_bits();
    let m = ((bits & ((1u64 << 52) - 1)) | (1u64 << 52)) as u128;
    let e = ((bits >> 52) & 0x7ff) as i64 - 1075;
    let prod = k as u128 * m;
    if e >= 0 {
        u64::try_from(prod << e).ok()
    } else {
        let shift = (-e) as u32;
        (prod & ((1u128 << shift) - 1) == 0).then(|| (prod >> shift) as u64)
    }
}

/// Independent evaluation of `sum A (2^b - 1)^-2`.
pub fn objective_oracle(weights: &[f64], bits: &[f64]) -> f64 {
    weights
        .iter()
        .zip(bits)
        .map(|(a, b)| a / (2f64.powf(*b) - 1.0).powi(2))
        .sum()
}

/// Derivative of `A (2^b - 1)^-2` in `b`, written out from the quotient rule.
pub fn objective_slope(weight: f64, b: f64) -> f64 {
    let p = 2f64.powf(b);
    -2.0 * weight * std::f64::consts::LN_2 * p / (p - 1.0).powi(3)
}

/// Weights spread over six decades, as seen in trained networks.
pub fn random_problem<R: Rng>(rng: &mut R, k: usize) -> AllocationProblem {
    let weights = (0..k)
        .map(|_| 10f64.powf(rng.random_range(-3.0..3.0)))
        .collect();
    AllocationProblem::from_weights(weights).unwrap()
}

pub fn int_bits(a: &BitAllocation) -> Vec<u64> {
    a.bits
        .iter()
        .map(|&b| {
            assert_eq!(b.fract(), 0.0);
            b as u64
        })
        .collect()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Binary logistic regression with one scalar quantizer per parameter, so
/// sensitivities come out per parameter.
const RANGE: f64 = 1e6;

pub struct LogReg {
    pub theta: Vec<f64>,
    quantizers: Vec<QuantizerState>,
}

impl LogReg {
    pub fn new(theta: Vec<f64>) -> Self {
        let cfg = QuantizerConfig::new(
            Role::Weight,
            Signedness::Signed,
            Granularity::PerTensor,
            QuantMode::Hard,
            2,
            8,
        )
        .unwrap();
        let quantizers = (0..theta.len())
            .map(|i| QuantizerState::new(QuantizerId(i as u32), cfg, vec![RANGE], 8.0, 1).unwrap())
            .collect();
        Self { theta, quantizers }
    }

    /// Loss on `batch`, the parameter leaves and their clipped copies. The
    /// last parameter is the bias.
    pub fn graph(
        theta: &[f64],
        tape: &mut Tape,
        batch: &Batch,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let n = batch.len();
        let d = theta.len() - 1;
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|j| (0..n).map(|r| batch.inputs.data()[r * d + j]).collect())
            .collect();
        let leaves: Vec<Var> = theta
            .iter()
            .map(|&t| tape.leaf(Tensor::matrix(1, 1, vec![t])))
            .collect();
        // the probe contract asks for clipped parameters; the ranges never bind here
        let clipped = leaves
            .iter()
            .map(|&v| tape.clamp(v, -RANGE, RANGE, GradPolicy::PassThrough))
            .collect::<Result<Vec<Var>>>()?;
        let ones = tape.constant(Tensor::matrix(n, 1, vec![1.0; n]));
        let mut z = tape.matmul(ones, clipped[d])?;
        for j in 0..d {
            let x = tape.constant(Tensor::matrix(n, 1, cols[j].clone()));
            let term = tape.matmul(x, clipped[j])?;
            z = tape.add(z, term)?;
        }
        // logits [z, 0]: class 0 has log-odds z against class 1
        let spread = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let logits = tape.matmul(z, spread)?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        Ok((loss, leaves, clipped))
    }

    pub fn gradient(theta: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (loss, leaves, _) = Self::graph(theta, &mut tape, batch)?;
        tape.backward(loss)?;
        Ok(leaves.iter().map(|&v| tape.grad(v).unwrap()[0]).collect())
    }

    pub fn loss(theta: &[f64], batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _, _) = Self::graph(theta, &mut tape, batch)?;
        Ok(tape.value(loss).data()[0])
    }
}

impl SensitivityProbe for LogReg {
    type Batch = Batch;

    fn quantizers(&self) -> &[QuantizerState] {
        &self.quantizers
    }

    fn probe_graph(&self, tape: &mut Tape, batch: &Batch) -> Result<ProbeGraph> {
        let (loss, _, clipped) = Self::graph(&self.theta, tape, batch)?;
        let targets = clipped
            .iter()
            .enumerate()
            .map(|(i, &var)| ProbeTarget {
                quantizer: QuantizerId(i as u32),
                var,
                kind: TargetKind::Parameter,
            })
            .collect();
        Ok(ProbeGraph { loss, targets })
    }
}

/// Linearly separable-ish data with feature `j` scaled by `scales[j]`.
pub fn logistic_data<R: Rng>(rng: &mut R, n: usize, scales: &[f64]) -> Dataset {
    let d = scales.len();
    let truth: Vec<f64> = (0..d)
        .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = scales
            .iter()
            .map(|s| s * rng.random_range(-1.0..1.0))
            .collect();
        let z: f64 = x
            .iter()
            .zip(&truth)
            .zip(scales)
            .map(|((x, t), s)| x * t / s)
            .sum();
        let p = 1.0 / (1.0 + (-2.0 * z).exp());
        labels.push(if rng.random::<f64>() < p { 0 } else { 1 });
        features.extend(x);
    }
    Dataset::new(features, labels, d, 2).unwrap()
}
