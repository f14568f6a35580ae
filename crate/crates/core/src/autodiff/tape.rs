use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Gradient rule for the piecewise-constant and piecewise-linear ops.
///
/// | policy            | round | clamp                    |
/// |-------------------|-------|--------------------------|
/// | `Exact`           | 0     | 1 inside `[lo, hi]`, else 0 |
/// | `StraightThrough` | 1     | 1 inside `[lo, hi]`, else 0 |
/// | `PassThrough`     | 1     | 1 everywhere             |
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradPolicy {
    Exact,
    StraightThrough,
    PassThrough,
}

/// How the right operand of a binary op is laid out against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// One value per index of the trailing axis.
    Channel,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
        policy: GradPolicy,
    },
    Round(Var, GradPolicy),
    Noise(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    /// Samples drawn by a noise op, kept so backward sees the realized noise.
    saved: Option<Vec<f64>>,
}

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, which is a topological order of the graph.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a tensor that never receives a gradient (inputs, labels, frozen values).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// Gradient from the last [`Tape::backward`], if `v` is tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    /// Noise samples drawn by [`Tape::add_uniform_noise`] for `v`.
    pub fn saved_noise(&self, v: Var) -> Option<&[f64]> {
        self.node(v).saved.as_deref()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index]
    }

    fn check(&self, op: &'static str, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract(format!(
                "{op}: operand is not on this tape"
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.push_saved(value, op, tracked, None)
    }

    fn push_saved(&mut self, value: Tensor, op: Op, tracked: bool, saved: Option<Vec<f64>>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            tracked,
            saved,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.index].tracked)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        self.check(op, a)?;
        self.check(op, b)?;
        let (lhs, rhs) = (self.value(a), self.value(b));
        if lhs.shape() == rhs.shape() {
            Ok(Broadcast::Same)
        } else if rhs.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if rhs.shape().len() == 1 && rhs.len() == lhs.last_dim() {
            Ok(Broadcast::Channel)
        } else {
            Err(Error::Shape {
                op,
                lhs: lhs.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = self.broadcast(op, a, b)?;
        let lhs = self.value(a);
        let rhs = self.value(b).data();
        let cols = lhs.last_dim();
        let data = lhs
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rhs[rhs_index(bc, i, cols)]))
            .collect();
        let out = Tensor::new(lhs.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, make(a, b, bc), tracked))
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        self.check(op, x)?;
        let input = self.value(x);
        let out = Tensor::new(
            input.shape().to_vec(),
            input.data().iter().map(|&v| f(v)).collect(),
        )?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(out, kind, tracked))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (lhs, rhs) = (self.value(a), self.value(b));
        if lhs.shape().len() != 2 || rhs.shape().len() != 2 || lhs.shape()[1] != rhs.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: lhs.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (n, k, m) = (lhs.shape()[0], lhs.shape()[1], rhs.shape()[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(lhs.data(), rhs.data(), &mut out, n, k, m);
        let out = Tensor::new(vec![n, m], out)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn div_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("div_scalar", x, |v| v / c, Op::DivScalar(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn round(&mut self, x: Var, policy: GradPolicy) -> Result<Var> {
        self.unary("round", x, f64::round_ties_even, Op::Round(x, policy))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64, policy: GradPolicy) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::contract(format!("clamp: empty range [{lo}, {hi}]")));
        }
        self.unary(
            "clamp",
            x,
            |v| v.clamp(lo, hi),
            Op::Clamp { x, lo, hi, policy },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check("sum", x)?;
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check("mean", x)?;
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), tracked))
    }

    /// Adds i.i.d. `U[-1/2, 1/2]` noise per element. The draw is saved on the tape.
    pub fn add_uniform_noise<R: Rng + ?Sized>(&mut self, x: Var, rng: &mut R) -> Result<Var> {
        self.check("noise", x)?;
        let input = self.value(x);
        let noise: Vec<f64> = (0..input.len())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        self.add_fixed_noise(x, noise)
    }

    /// Adds a caller-supplied noise realization (used to freeze noise in tests).
    pub fn add_fixed_noise(&mut self, x: Var, noise: Vec<f64>) -> Result<Var> {
        self.check("noise", x)?;
        let input = self.value(x);
        if noise.len() != input.len() {
            return Err(Error::Shape {
                op: "noise",
                lhs: input.shape().to_vec(),
                rhs: vec![noise.len()],
            });
        }
        let data = input
            .data()
            .iter()
            .zip(&noise)
            .map(|(v, e)| v + e)
            .collect();
        let out = Tensor::new(input.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push_saved(out, Op::Noise(x), tracked, Some(noise)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`; `logits` is `[n, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check("softmax_cross_entropy", logits)?;
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &t.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let tracked = self.tracked_any(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total / n as f64), op, tracked))
    }

    /// Reverse sweep from a scalar `loss`. Every tracked node gets a gradient
    /// (zero if the loss does not depend on it); gradients from multiple uses add.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check("backward", loss)?;
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            let grad = if !node.tracked {
                None
            } else {
                Some(
                    grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; node.value.len()]),
                )
            };
            node.value.set_grad(grad);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (lhs, rhs) = (self.value(*a), self.value(*b));
                let (n, k, m) = (lhs.shape()[0], lhs.shape()[1], rhs.shape()[1]);
                if self.is_tracked(*a) {
                    // dA = dC * B^T
                    let ga = slot(grads, *a, n * k);
                    for r in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for c in 0..m {
                                acc += g[r * m + c] * rhs.data()[p * m + c];
                            }
                            ga[r * k + p] += acc;
                        }
                    }
                }
                if self.is_tracked(*b) {
                    // dB = A^T * dC
                    let gb = slot(grads, *b, k * m);
                    for r in 0..n {
                        for p in 0..k {
                            let av = lhs.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                gb[p * m + c] += av * g[r * m + c];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b, bc) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate_reduced(grads, *b, *bc, node.value.last_dim(), g.iter().copied());
            }
            Op::Sub(a, b, bc) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate_reduced(
                    grads,
                    *b,
                    *bc,
                    node.value.last_dim(),
                    g.iter().map(|v| -v),
                );
            }
            Op::Mul(a, b, bc) => {
                let cols = node.value.last_dim();
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .enumerate()
                        .map(|(j, gv)| gv * y[rhs_index(*bc, j, cols)]),
                );
                self.accumulate_reduced(
                    grads,
                    *b,
                    *bc,
                    cols,
                    g.iter().zip(x).map(|(gv, xv)| gv * xv),
                );
            }
            Op::Div(a, b, bc) => {
                let cols = node.value.last_dim();
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .enumerate()
                        .map(|(j, gv)| gv / y[rhs_index(*bc, j, cols)]),
                );
                self.accumulate_reduced(
                    grads,
                    *b,
                    *bc,
                    cols,
                    g.iter().enumerate().map(|(j, gv)| {
                        let d = y[rhs_index(*bc, j, cols)];
                        -gv * x[j] / (d * d)
                    }),
                );
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v * c)),
            Op::DivScalar(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v / c)),
            Op::Relu(x) => {
                let input = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(input)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::Clamp { x, lo, hi, policy } => {
                let input = self.value(*x).data();
                let pass_all = *policy == GradPolicy::PassThrough;
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(input).map(|(gv, &xv)| {
                        if pass_all || (*lo <= xv && xv <= *hi) {
                            *gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Round(x, policy) => {
                if *policy != GradPolicy::Exact {
                    self.accumulate(grads, *x, g.iter().copied());
                } else {
                    self.accumulate(grads, *x, g.iter().map(|_| 0.0));
                }
            }
            Op::Noise(x) => self.accumulate(grads, *x, g.iter().copied()),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                self.accumulate(
                    grads,
                    *logits,
                    probs.iter().enumerate().map(|(j, p)| {
                        let onehot = if labels[j / c] == j % c { 1.0 } else { 0.0 };
                        (p - onehot) * scale
                    }),
                );
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        contrib: impl Iterator<Item = f64>,
    ) {
        if !self.is_tracked(v) {
            return;
        }
        let buf = slot(grads, v, self.value(v).len());
        for (slot, c) in buf.iter_mut().zip(contrib) {
            *slot += c;
        }
    }

    fn accumulate_reduced(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        bc: Broadcast,
        cols: usize,
        contrib: impl Iterator<Item = f64>,
    ) {
        if !self.is_tracked(v) {
            return;
        }
        let buf = slot(grads, v, self.value(v).len());
        for (j, c) in contrib.enumerate() {
            buf[rhs_index(bc, j, cols)] += c;
        }
    }
}

fn rhs_index(bc: Broadcast, i: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Channel => i % cols,
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.index].get_or_insert_with(|| vec![0.0; len])
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let row = &mut out[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
