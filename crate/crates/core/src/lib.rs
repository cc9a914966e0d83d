//! Social media popularity prediction: dataset I/O, multi-block feature
//! transformation, gradient-boosted trees, a feedforward regressor,
//! user-grouped cross-validation with ensembling, and evaluation metrics.

pub mod data;
pub mod error;
pub mod folds;
pub mod gbdt;
pub mod manifest;
pub mod metrics;
pub mod mftm;
pub mod neuro;
pub mod numlin;
pub mod synth;

pub use error::{Error, Result};
