//! Laboratory for the train/test resolution discrepancy of image classifiers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that don't care.

mod binio;
pub mod error;
pub mod eval_harness;
pub mod experiment;
pub mod fixres;
pub mod image_pipeline;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor_core;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor_core::Tensor<f32>;
pub type Tensor64 = tensor_core::Tensor<f64>;
pub type Tape32 = tensor_core::Tape<f32>;
pub type Tape64 = tensor_core::Tape<f64>;
pub type MicroNet32 = model::MicroNet<f32>;
pub type MicroNet64 = model::MicroNet<f64>;
