//! Recurrent visual attention with a differentiable affine glimpse sampler.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod stn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Edram, ModelConfig};
pub use scalar::{DType, Scalar};
pub use stn::{AffineParams, SampleGrid};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Edram32 = Edram<f32>;
pub type Edram64 = Edram<f64>;
