//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every op in creation order; [`Tape::backward`] walks it
//! once in reverse. Straight-through behaviour of `round` and `clamp` is chosen
//! per call with a [`GradPolicy`], so the same tape serves hard quantization,
//! noise-injected quantization and clipped full-precision probes.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{GradPolicy, Tape, Var};
pub use tensor::Tensor;
