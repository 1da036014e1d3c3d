//! Semi-supervised classification with confidence-guided consistency
//! regularization.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Aliases at
//! the crate root fix the scalar for the common cases.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod confidence;
pub mod datakit;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pseudo;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Dataset32 = datakit::Dataset<f32>;
pub type Dataset64 = datakit::Dataset<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ExperimentData32 = trainer::ExperimentData<f32>;
pub type ExperimentData64 = trainer::ExperimentData<f64>;
pub type Trainer32<'a> = trainer::Trainer<'a, f32>;
pub type Trainer64<'a> = trainer::Trainer<'a, f64>;
