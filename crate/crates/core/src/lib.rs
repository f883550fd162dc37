//! Differentially private sparse SGD.
//!
//! Per-sample gradients are clipped over a selected subset of parameter
//! indices, summed, and noised only on that subset; parameters outside it
//! keep their values. The subset comes from random or magnitude selection
//! and is either fixed for the whole run (freezing) or redrawn every step
//! (selection). A Rényi-DP accountant turns the noise multiplier, sampling
//! rate and step count into an `(epsilon, delta)` guarantee.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what training uses.

pub mod accountant;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod sparsify;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{gaussian_sample, RngStream};
pub use scalar::Scalar;
pub use tensor::Shape;

pub type Tensor = tensor::Tensor<f64>;
pub type Model = nn::Model<f64>;
pub type ParamVec = nn::ParamVec<f64>;
pub type PerSampleGrads = nn::PerSampleGrads<f64>;
pub type NoisySparseUpdate = dp::NoisySparseUpdate<f64>;
pub type Dataset = data::Dataset<f64>;



pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = nn::Model<f32>;
