//! Volumetric multimodal model with a text-guided hierarchical mixture of
//! experts, trained end to end on a synthetic corpus.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common choices.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod mllm;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod synth_data;
pub mod tensor;
pub mod tgh_moe;
pub mod training;
pub mod vit_adapt;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Volume32 = vit_adapt::VolumeTensor<f32>;
pub type Volume64 = vit_adapt::VolumeTensor<f64>;
pub type Mllm32 = mllm::Mllm<f32>;
pub type Mllm64 = mllm::Mllm<f64>;
