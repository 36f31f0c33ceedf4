//! Distributed importance-sampling SGD.
//!
//! The numeric core (`nn`, `sampler`, `variance`) is generic over the scalar
//! type; the actors, store and experiment harness run in double precision.

pub mod actors;
pub mod bench;
pub mod dataset;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod store;
pub mod variance;

pub use scalar::Scalar;

pub type Matrix64 = nn::Matrix<f64>;
pub type Matrix32 = nn::Matrix<f32>;
pub type ModelParams64 = nn::ModelParams<f64>;
pub type ModelParams32 = nn::ModelParams<f32>;
pub type Proposal64 = sampler::Proposal<f64>;
pub type Proposal32 = sampler::Proposal<f32>;
pub type WeightEntry64 = sampler::WeightEntry<f64>;
pub type VarianceReport64 = variance::VarianceReport<f64>;
