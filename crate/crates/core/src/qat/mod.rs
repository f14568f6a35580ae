//! Quantization-aware training with periodic bitwidth reallocation.

mod model;
mod optim;
mod train;

pub use model::{
    evaluate, evaluate_with, Gradients, Linear, Mlp, ModelSpec, QuantSetup, StepOutput,
};
pub use optim::{range_step, sgd_step};
pub use train::{
    fixed_precision_baseline, probe_sensitivities, train, AllocationEvent, AllocatorKind,
    IterationRecord, RunReport, TrainConfig, TrajectoryRow,
};
