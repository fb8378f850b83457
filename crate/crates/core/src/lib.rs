//! Ternary-quantized, sparsity-gated tiny ViT with exact operation
//! accounting, a desk-scale training engine, and a synthetic
//! place-recognition retrieval harness.
//!
//! The numeric core is generic over the storage scalar (`f32`/`f64`, see
//! [`scalar::Scalar`]); the concrete aliases below pin the two
//! instantiations used throughout: `f32` for everything that touches the
//! on-disk formats, `f64` for gradient verification.

pub mod cli;
pub mod error;
pub mod gate;
pub mod kernels;
pub mod model;
pub mod retrieval;
pub mod scalar;
pub mod tensor;
pub mod ternary;
pub mod train;
pub mod util;

pub use error::{Error, Result};

/// Production tensor type (matches the on-disk f32 formats).
pub type Tensor32 = tensor::DenseTensor<f32>;
/// Wide tensor type for finite-difference verification.
pub type Tensor64 = tensor::DenseTensor<f64>;
/// Production model type.
pub type Model32 = model::VitModel<f32>;
/// Wide model type for gradient checks.
pub type Model64 = model::VitModel<f64>;
