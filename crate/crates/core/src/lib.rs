//! Measure-level music VAE with latent space regularisation.
//!
//! The pipeline: a 24-slot measure representation ([`score`], [`midi`]), four
//! musical attributes ([`attributes`]), a small reverse-mode autodiff kernel
//! ([`tensor`]), a recurrent VAE whose latent dims 0..4 are regularised towards
//! the attributes ([`model`], [`training`]), and the precomputed latent grid the
//! interactive front end navigates ([`atlas`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix it to `f64`, which is what the tools use.

pub mod atlas;
pub mod attributes;
pub mod checkpoint;
pub mod corpus;
pub mod midi;
pub mod model;
pub mod scalar;
pub mod score;
pub mod stats;
pub mod tensor;
pub mod training;

pub use attributes::{attributes, AttributeVector, MetricalWeightProfile};
pub use scalar::Scalar;
pub use score::{Measure, NoteEvent, Token, Vocabulary};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type LatentVector64 = model::LatentVector<f64>;
pub type GaussianPosterior64 = model::GaussianPosterior<f64>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
