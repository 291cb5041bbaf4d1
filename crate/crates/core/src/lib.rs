//! Valence-arousal affect toolkit: agreement metrics, annotation traces,
//! frame datasets, preprocessing and a small CNN+GRU regression stack.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common choices.

pub mod annotation;
pub mod dataio;
pub mod eval;
pub mod metrics;
pub mod nn;
pub mod preproc;
pub mod synth;
mod scalar;
pub mod train;

pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
