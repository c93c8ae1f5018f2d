//! Lip-landmark assisted active speaker detection.
//!
//! The crate covers the whole desk-scale pipeline: dense encoding of lip
//! landmark tracks, an audiovisual reference network trained with a
//! dual-pass consistency objective so that inference needs no landmark
//! detector, robustness evaluation under audio misalignment and background
//! noise, benchmark curation, and a procedural audiovisual corpus.
//!
//! Numerical code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below pin the common instantiations.

pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod curation;
pub mod data;
pub mod error;
pub mod eval;
pub mod lip;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type AsdModel32 = model::AsdModel<f32>;
pub type AsdModel64 = model::AsdModel<f64>;
pub type LipAggregator32 = lip::LipAggregator<f32>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
