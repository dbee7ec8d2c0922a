//! Gaussian process prior variational autoencoders.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndtensor`]: dense tensors, a reverse-mode tape, convolutions, and the
//!   `GPT1` binary container.
//! * [`nnet`]: encoder/decoder networks and the reparameterised sampler.
//! * [`kernels`]: view and object kernels and the low-rank factor `V`.
//! * [`lowrank_gp`]: solves, log-determinants and predictions for `K = VVᵀ + αI`.
//! * [`taylor_grad`]: linearised GP term and the low-memory full-batch gradient.
//! * [`training`]: losses, Adam, λ selection and the phase schedules.
//! * [`datagen`]: the rotated-glyph dataset and its split protocol.
//! * [`baselines`]: LIVAE, CVAE prediction, and the MSE evaluation.
//!
//! Networks are generic over [`Scalar`] (`f32` or `f64`); everything on the
//! Gaussian-process side runs in `f64`.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod lowrank_gp;
pub mod memtrack;
pub mod ndtensor;
pub mod nnet;
pub mod rng;
pub mod scalar;
pub mod taylor_grad;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = ndtensor::Tensor<f32>;
pub type Tensor64 = ndtensor::Tensor<f64>;
pub type Graph32 = ndtensor::Graph<f32>;
pub type Graph64 = ndtensor::Graph<f64>;
pub type Model32 = training::Model<f32>;
pub type Model64 = training::Model<f64>;
