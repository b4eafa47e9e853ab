//! Instrumented benchmark of self-attention variants in a miniature GPT-2.

pub mod attention;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod profiler;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use attention::{AttentionSpec, Variant};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelState};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type AttentionWeights32 = attention::AttentionWeights<f32>;
pub type AttentionWeights64 = attention::AttentionWeights<f64>;
pub type Model32 = model::ModelState<f32>;
pub type Model64 = model::ModelState<f64>;
