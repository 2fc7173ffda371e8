//! Self-supervised pre-training of a joint image/tabular encoder that stays
//! usable when tabular cells are missing.
//!
//! The crate is generic over the element type ([`Scalar`]); the aliases below
//! fix it to `f32`, which is what training uses.

// `!(x > 0.0)` is also true for NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gradsuite;
pub mod init;
pub mod model;
pub mod numeric;
pub mod ssl;
pub mod vision;

pub use error::{Error, Result};
pub use numeric::Scalar;

pub type Tensor32 = numeric::Tensor<f32>;
pub type Tape32 = numeric::Tape<f32>;
pub type ParamStore32 = numeric::ParamStore<f32>;
pub type Model32 = model::Model<f32>;
