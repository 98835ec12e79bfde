//! Dual-task windowed-transformer framework.
//!
//! A shared shifted-window transformer encoder feeds two decoders: one
//! regenerates the follow-up scan, the other predicts the prognostic label.
//! The decoders are coupled by interactive attention: the generation
//! decoder computes attention weights from encoder features and hands the
//! same weights to the classification decoder.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the training precision.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod interactive;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patch;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
