//! Bi-temporal change detection: a weight-shared ResNet encoder, gated
//! temporal fusion, cross-scale attention fusion and a channel-attention
//! decoder, trained with a focal + dice objective.
//!
//! Everything runs in `f64` on a small reverse-mode autograd tape
//! ([`graph::Graph`]); parameters live in a [`nn::ParamStore`] keyed by
//! module path.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod profile;
pub mod spatial_fusion;
pub mod temporal_fusion;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use tensor::Tensor;
