//! Cross-modal adaptive dual association (CADA) for text-to-image person
//! retrieval, built on a small define-by-run autodiff engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` / `f64`); the aliases at
//! the bottom of this file fix the element type for everyday use.

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod scalar;
pub mod textproc;
pub mod trainer;

pub use error::{CadaError, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Parameter32 = numerics::Parameter<f32>;
pub type Cada32 = model::CadaModel<f32>;
pub type Cada64 = model::CadaModel<f64>;
