//! Sentence-level machine-translation quality estimation.
//!
//! A byte-level transformer encoder reads `[CLS] source [SEP] target [SEP]`,
//! pools one vector and regresses a quality score. Around it sit the
//! training loop (MSE, Adam, early stopping), WMT-style DA data handling,
//! score-averaging ensembles and Spearman/Pearson evaluation.

pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
