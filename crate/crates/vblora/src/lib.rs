//! Vector-bank low-rank adapters.
//!
//! All low-rank factor matrices are composed from one globally shared bank of
//! basis vectors through a differentiable top-k admixture: each length-`b`
//! sub-vector of a factor is a convex combination of the `k` bank rows with
//! the largest learnable logits. Training updates only the bank and the
//! logits; deployment stores the bank, the selected indices, and `k - 1`
//! admixture weights per sub-vector.
//!
//! Module map:
//! - [`bank`], [`logits`], [`tkam`], [`compose`]: the admixture core with
//!   exact hand-derived gradients and factor assembly.
//! - [`variants`]: ablated selection mechanisms (noisy top-k, Gumbel-softmax,
//!   straight-through, select-all) behind one interface.
//! - [`accounting`]: trainable/stored parameter counting for full fine-tuning,
//!   LoRA, VeRA, and the vector-bank method, plus named model presets.
//! - [`store`]: the `.vbla` adapter container - export, bit-exact round-trip,
//!   and logit-free reconstruction.
//! - [`harness`]: a desk-scale frozen-base transformer, split-learning-rate
//!   training, finite-difference gradient checking, and selection-footprint
//!   instrumentation.
//! - [`config`]: the flat `key = value` run configuration.

pub mod accounting;
pub mod bank;
pub mod compose;
pub mod config;
pub mod error;
pub mod harness;
pub mod logits;
pub mod real;
pub mod store;
pub mod tkam;
pub mod variants;

pub use bank::{init_bank, VectorBank};
pub use compose::{
    adapted_forward, compose_a, compose_b, compose_factors, merge_delta, merge_into_weight,
    ComposedFactors,
};
pub use error::{Error, ParseError, Result};
pub use logits::{init_logits, LogitTensor, Side};
pub use real::Real;
pub use tkam::{select_topk, tkam_backward, topk_admix, SubVector, TkamGrad};
