//! Relevance-guided visual-token pruning, end to end at desk scale:
//!
//! - [`numerics`]: tensors, reverse-mode differentiation, Adam.
//! - [`toylm`]: a tiny decoder-only LM over a synthetic grid-QA task, with
//!   eager attention capture and per-step attention gradients.
//! - [`explain`]: layer-wise relevance propagation over captured attention,
//!   reduced to per-visual-token scores.
//! - [`compress`]: turning scores into pruning plans, plus random and
//!   attention-score baselines.
//! - [`compressor`]: the learned 1-D convolutional predictor that maps
//!   first-layer attention to relevance, trained with a KL objective.
//! - [`flops`]: exact-integer cost accounting for the LM, the first-layer
//!   attention probe, and the convolutional predictor.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); pipelines
//! run on the `f32` aliases below, and tests instantiate `f64` where a
//! higher-precision reference is useful.

pub mod compress;
pub mod compressor;
pub mod error;
pub mod explain;
pub mod flops;
pub mod numerics;
pub mod testkit;
pub mod toylm;

pub use error::{Error, Result};
pub use numerics::Scalar;

/// f32 tensor, the pipeline default.
pub type Tensor32 = numerics::Tensor<f32>;
/// f64 tensor, used by high-precision reference paths.
pub type Tensor64 = numerics::Tensor<f64>;
/// f32 recording graph.
pub type Graph32 = numerics::Graph<f32>;
/// f64 recording graph.
pub type Graph64 = numerics::Graph<f64>;
