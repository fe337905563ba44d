//! Multi-scale feature-fusion segmentation networks as an analyzable graph.
//!
//! The crate builds EfficientNet-encoder / BiFPN-decoder segmentation models
//! (the ESeg family) as a single graph IR that supports shape inference,
//! parameter and FLOP accounting, execution with reverse-mode gradients,
//! block-level rewrites, and a desk-scale training loop.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root pick a concrete precision.

pub mod backbone;
pub mod blocks;
pub mod deploy;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod selftrain;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Params};
pub use scalar::{ElemType, Scalar};
pub use tensor::{Shape, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ParamsF32 = Params<f32>;
pub type ParamsF64 = Params<f64>;
