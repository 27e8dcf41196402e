//! Desk-scale hybrid state-space/attention language models.
//!
//! The crate covers the whole recipe at toy scale: a small reverse-mode
//! autodiff engine, bit-exact FP8 emulation with per-tensor current scaling,
//! hybrid Mamba-2/attention/FFN models, a pre-training loop, a constant-memory
//! incremental decoder with cost accounting, and a prune-search-distill
//! compression pipeline.

pub mod autodiff;
pub mod checkpoint;
pub mod compress;
pub mod corpus;
pub mod cost;
pub mod error;
pub mod fp8;
pub mod infer;
pub mod kernels;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
