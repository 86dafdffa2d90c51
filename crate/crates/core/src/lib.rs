//! CPU inference engine for RECIST-prompted 3D lesion segmentation in CT.
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`); the
//! aliases below fix it to `f32`, which is what the pipeline runs in.

pub mod efficiency;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod prompt;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelWeights};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor4<f32>;
pub type Network = model::Network<f32>;
pub type Network64 = model::Network<f64>;
pub type Logits = postprocess::LogitVolume<f32>;
pub type Tokens = prompt::PromptTokens<f32>;
