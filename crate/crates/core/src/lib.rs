//! Fine-tuning with self-distillation against a per-epoch frozen copy of the
//! encoder, plus a synthetic pretrain/finetune benchmark, forgetting metrics
//! and a lambda sweep harness.
//!
//! Pipeline: [`data::make_transfer_benchmark`] → [`trainer::pretrain`] →
//! [`trainer::fit`] (or [`sweep::run_sweep`] over a lambda grid).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
