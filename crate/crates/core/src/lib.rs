//! Adversarial attacks on a visual diffusion policy, with everything they
//! need: a small reverse-mode autodiff engine, DDPM/DDIM sampling, a 2D push
//! task with a scripted expert, behavior cloning, and an evaluation harness.
//!
//! The numerical core is generic over [`Scalar`]; the aliases below fix the
//! precision used for training, attacks and benchmarks.

pub mod attacks;
pub mod autodiff;
pub mod config;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod eval;
pub mod io;
mod kernels;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod scalar;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision of the pipeline.
pub type Real = f32;
pub type Policy = policy::DiffusionPolicy<Real>;
pub type PolicyObservation = policy::Observation<Real>;
pub type Trainer = policy::TrainState<Real>;
pub type Graph = autodiff::Graph<Real>;
pub type Tensor = tensor::Tensor<Real>;
