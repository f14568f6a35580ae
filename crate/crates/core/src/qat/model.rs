use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alloc::BitAllocation;
use crate::autodiff::{GradPolicy, Tape, Tensor, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::quant::{
    clip_bounds, clip_params, mse_range_init, quantize_on, Granularity, QuantMode, QuantizerConfig,
    QuantizerId, QuantizerState, Role, Signedness,
};
use crate::sensitivity::{ProbeGraph, ProbeTarget, SensitivityProbe, TargetKind};

/// Fully connected ReLU network. Every layer's weight is quantized
/// (signed, per output channel); every layer input except the network input is
/// quantized (unsigned, per tensor, since it follows a ReLU). Quantizer ids
/// follow the forward order: `w0, a1, w1, a2, w2, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input width, hidden widths, number of classes.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::config(
                "model.widths",
                "need at least two layers (three widths)",
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("model.widths", "widths must be positive"));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn quantizer_count(&self) -> usize {
        2 * self.layers() - 1
    }
}

/// How quantizers are built for a fresh model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSetup {
    pub b_min: u32,
    pub b_max: u32,
    pub mode: QuantMode,
    pub bits: f64,
    /// `false` runs every pass in full precision.
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Slot {
    weight: usize,
    act: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: ModelSpec,
    layers: Vec<Linear>,
    quantizers: Vec<QuantizerState>,
    slots: Vec<Slot>,
    enabled: bool,
}

pub(crate) enum Pass<'a> {
    FullPrecision,
    Quantized(Option<&'a mut ChaCha8Rng>),
    Probe,
}

pub(crate) struct Graph {
    pub logits: Var,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub alphas: Vec<Option<Var>>,
    pub probes: Vec<ProbeTarget>,
}

/// Gradients of one training step, indexed like the model's layers and quantizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// `None` for quantizers that did not take part in the pass.
    pub alphas: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: Gradients,
}

impl Mlp {
    pub fn new(spec: &ModelSpec, setup: QuantSetup) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::with_capacity(spec.layers());
        let mut quantizers = Vec::with_capacity(spec.quantizer_count());
        let mut slots = Vec::with_capacity(spec.layers());
        for (l, pair) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::numeric(e.to_string()))?;
            let weight: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| normal.sample(&mut rng))
                .collect();
            layers.push(Linear {
                weight: Tensor::matrix(fan_in, fan_out, weight),
                bias: Tensor::from_vec(vec![0.0; fan_out]),
            });

            let act = if l > 0 {
                let cfg = QuantizerConfig::new(
                    Role::Activation,
                    Signedness::Unsigned,
                    Granularity::PerTensor,
                    setup.mode,
                    setup.b_min,
                    setup.b_max,
                )?;
                let id = QuantizerId(quantizers.len() as u32);
                quantizers.push(QuantizerState::new(id, cfg, vec![1.0], setup.bits, fan_in)?);
                Some(quantizers.len() - 1)
            } else {
                None
            };
            let cfg = QuantizerConfig::new(
                Role::Weight,
                Signedness::Signed,
                Granularity::PerChannel,
                setup.mode,
                setup.b_min,
                setup.b_max,
            )?;
            let id = QuantizerId(quantizers.len() as u32);
            quantizers.push(QuantizerState::new(
                id,
                cfg,
                vec![1.0; fan_out],
                setup.bits,
                fan_in * fan_out,
            )?);
            slots.push(Slot {
                weight: quantizers.len() - 1,
                act,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            quantizers,
            slots,
            enabled: setup.enabled,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn quantizers(&self) -> &[QuantizerState] {
        &self.quantizers
    }

    pub fn quantizers_mut(&mut self) -> &mut [QuantizerState] {
        &mut self.quantizers
    }

    pub fn quantizer_ids(&self) -> Vec<QuantizerId> {
        self.quantizers.iter().map(|q| q.id).collect()
    }

    pub fn quantization_enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_quantization_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn current_allocation(&self) -> BitAllocation {
        let bits: Vec<f64> = self.quantizers.iter().map(|q| q.bitwidth).collect();
        BitAllocation {
            ids: self.quantizer_ids(),
            integral: bits.iter().all(|b| b.fract() == 0.0),
            bits,
        }
    }

    pub fn apply_allocation(&mut self, alloc: &BitAllocation) -> Result<()> {
        if alloc.ids != self.quantizer_ids() {
            return Err(Error::contract(
                "allocation does not cover the model's quantizers",
            ));
        }
        for (q, &b) in self.quantizers.iter_mut().zip(&alloc.bits) {
            q.set_bitwidth(b)?;
        }
        Ok(())
    }

    pub fn set_mode(&mut self, mode: QuantMode) -> Result<()> {
        self.quantizers
            .iter_mut()
            .try_for_each(|q| q.set_mode(mode))
    }

    /// Sets every range by the MSE grid search on `batch` at the current
    /// (rounded) bitwidths. Activation ranges see full-precision inputs.
    pub fn init_ranges(&mut self, batch: &Batch) -> Result<()> {
        let mut tape = Tape::new();
        let mut h = tape.constant(batch.inputs.clone());
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(tape.value(h).clone());
            let w = tape.constant(layer.weight.clone());
            let b = tape.constant(layer.bias.clone());
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = if l + 1 < self.layers.len() {
                tape.relu(z)?
            } else {
                z
            };
        }
        for (l, slot) in self.slots.iter().enumerate() {
            let wq = &mut self.quantizers[slot.weight];
            wq.alpha = mse_range_init(
                &self.layers[l].weight,
                wq.bitwidth.round() as u32,
                &wq.config,
            )?;
            if let Some(a) = slot.act {
                let aq = &mut self.quantizers[a];
                aq.alpha = mse_range_init(&inputs[l], aq.bitwidth.round() as u32, &aq.config)?;
            }
        }
        Ok(())
    }

    pub(crate) fn record(&self, tape: &mut Tape, inputs: &Tensor, pass: Pass<'_>) -> Result<Graph> {
        let n = inputs.shape()[0];
        let quantize = self.enabled && matches!(pass, Pass::Quantized(_));
        let probe = matches!(pass, Pass::Probe);
        let mut rng = match pass {
            Pass::Quantized(r) => r,
            _ => None,
        };
        let mut graph = Graph {
            logits: tape.constant(inputs.clone()),
            weights: Vec::with_capacity(self.layers.len()),
            biases: Vec::with_capacity(self.layers.len()),
            alphas: vec![None; self.quantizers.len()],
            probes: Vec::new(),
        };
        let mut h = graph.logits;
        for (l, (layer, slot)) in self.layers.iter().zip(&self.slots).enumerate() {
            if let Some(a) = slot.act {
                let q = &self.quantizers[a];
                if quantize {
                    let alpha = tape.leaf(Tensor::from_vec(q.alpha.clone()));
                    graph.alphas[a] = Some(alpha);
                    h = quantize_on(tape, h, alpha, q, rng.as_deref_mut())?;
                } else if probe {
                    let (lo, hi) = clip_bounds(q.config.signedness, q.alpha[0]);
                    h = tape.clamp(h, lo, hi, GradPolicy::PassThrough)?;
                    graph.probes.push(ProbeTarget {
                        quantizer: q.id,
                        var: h,
                        kind: TargetKind::Activation { batch_size: n },
                    });
                }
            }
            let wq = &self.quantizers[slot.weight];
            let w_leaf = if probe {
                tape.leaf(clip_params(&layer.weight, wq)?)
            } else {
                tape.leaf(layer.weight.clone())
            };
            graph.weights.push(w_leaf);
            let w = if quantize {
                let alpha = tape.leaf(Tensor::from_vec(wq.alpha.clone()));
                graph.alphas[slot.weight] = Some(alpha);
                quantize_on(tape, w_leaf, alpha, wq, rng.as_deref_mut())?
            } else {
                w_leaf
            };
            if probe {
                graph.probes.push(ProbeTarget {
                    quantizer: wq.id,
                    var: w_leaf,
                    kind: TargetKind::Parameter,
                });
            }
            let b = tape.leaf(layer.bias.clone());
            graph.biases.push(b);
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = if l + 1 < self.layers.len() {
                tape.relu(z)?
            } else {
                z
            };
        }
        graph.logits = h;
        Ok(graph)
    }

    /// Loss, batch accuracy and gradients of one training step. The forward is
    /// quantized when quantization is enabled; noise-mode quantizers draw from `rng`.
    pub fn step(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let pass = if self.enabled {
            Pass::Quantized(rng)
        } else {
            Pass::FullPrecision
        };
        let graph = self.record(&mut tape, &batch.inputs, pass)?;
        let loss = tape.softmax_cross_entropy(graph.logits, &batch.labels)?;
        tape.backward(loss)?;
        let grad = |v: Var| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default();
        Ok(StepOutput {
            loss: tape.value(loss).data()[0],
            accuracy: correct(tape.value(graph.logits), &batch.labels) as f64 / batch.len() as f64,
            grads: Gradients {
                weights: graph.weights.iter().map(|&v| grad(v)).collect(),
                biases: graph.biases.iter().map(|&v| grad(v)).collect(),
                alphas: graph.alphas.iter().map(|v| v.map(grad)).collect(),
            },
        })
    }

    /// Logits under hard quantization at the current bitwidths (or full
    /// precision when quantization is disabled).
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let graph = self.record(&mut tape, inputs, Pass::Quantized(None))?;
        Ok(tape.value(graph.logits).clone())
    }
}

impl SensitivityProbe for Mlp {
    type Batch = Batch;

    fn quantizers(&self) -> &[QuantizerState] {
        &self.quantizers
    }

    fn probe_graph(&self, tape: &mut Tape, batch: &Batch) -> Result<ProbeGraph> {
        let graph = self.record(tape, &batch.inputs, Pass::Probe)?;
        let loss = tape.softmax_cross_entropy(graph.logits, &batch.labels)?;
        Ok(ProbeGraph {
            loss,
            targets: graph.probes,
        })
    }
}

/// Number of rows whose first maximal logit sits at the label.
fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

const EVAL_CHUNK: usize = 256;

/// Argmax accuracy under hard quantization at the current bitwidths.
/// Fractional bitwidths are rounded to the nearest integer for evaluation.
/// An empty dataset scores 0.
pub fn evaluate(model: &Mlp, data: &Dataset) -> Result<f64> {
    evaluate_with(Exec::default(), model, data)
}

pub fn evaluate_with(exec: Exec, model: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut model = model.clone();
    for q in &mut model.quantizers {
        q.config.mode = QuantMode::Hard;
        q.bitwidth = q.bitwidth.round_ties_even();
    }
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let counts = exec.map_range(chunks, |c| -> Result<usize> {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(data.len())).collect();
        let batch = data.batch(&idx)?;
        Ok(correct(&model.logits(&batch.inputs)?, &batch.labels))
    });
    let total: usize = counts.into_iter().sum::<Result<usize>>()?;
    Ok(total as f64 / data.len() as f64)
}
