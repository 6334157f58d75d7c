//! Modular transformer-based sequential recommendation.
//!
//! The crate is organised around interchangeable components:
//!
//! - [`tensor`]: dense tensors with a reverse-mode autodiff tape,
//! - [`data`]: ingestion, k-core filtering, temporal splits, LOO validation,
//! - [`model`]: embeddings plus Post-LN or gated pre-norm (LiGR) blocks,
//! - [`objectives`]: shifted sequence, MLM, next action, all action, dense all action,
//! - [`negatives`]: uniform / in-batch / mixed samplers with logQ values,
//! - [`losses`]: BCE, gBCE and sampled softmax,
//! - [`trainer`]: Adam, validation-loss early stopping, checkpoints,
//! - [`evaluation`]: top-K lists, NDCG / Recall / Coverage, popularity baseline, Pareto flags,
//! - [`config`]: experiment configs, named presets, run manifests,
//! - [`pipeline`]: prepare, train and evaluate steps used by the CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod negatives;
pub mod objectives;
pub mod oracles;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, Tensor, Var};
