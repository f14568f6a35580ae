//! Mixed-precision quantization with constrained, sensitivity-driven bitwidth
//! allocation during quantization-aware training.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small reverse-mode tape over `f64` tensors.
//! * [`quant`]: simulated uniform quantizers (hard/STE and noise variants).
//! * [`sensitivity`]: squared-gradient sensitivities with EMA smoothing and a
//!   finite-difference Hessian-diagonal reference.
//! * [`alloc`]: bitwidth allocation under average-bitwidth constraints.
//! * [`qat`]: MLP models and the two-phase training loop.
//! * [`io`]: configuration, datasets and output files.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod io;
pub mod par;
pub mod qat;
pub mod quant;
pub mod sensitivity;

pub use error::{Error, Result};
