//! Δ-aware token merging for bidirectional state-space vision encoders.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod container;
mod error;
mod scalar;

pub mod bench;
pub mod data;
pub mod merge;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod ssm;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
