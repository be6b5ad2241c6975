//! Desk-scale training harness.
//!
//! A tiny frozen-base transformer with vector-bank adapters on a configurable
//! module set, a split-learning-rate optimizer, finite-difference gradient
//! verification, and selection-footprint instrumentation.

mod footprint;
mod gradcheck;
mod model;
mod task;
mod train;

pub use footprint::{usage_histogram_from, FootprintLog, FootprintRecord, UsageHistogram};
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{
    loss_and_backward, AdaptedModules, AdapterGrads, AdapterState, AdapterUnit, BaseWeights,
    BlockWeights, HarnessAdapterConfig, StepOutput, TinyModel, TinyTransformerSpec,
};
pub use task::PermutationCopyTask;
pub use train::{train, write_metrics_csv, StepMetric, TrainConfig, TrainOutput};

/// Task seed derived from the single run seed.
pub fn task_seed(seed: u64) -> u64 {
    model::derive_seed(seed, train::TASK_STREAM)
}
