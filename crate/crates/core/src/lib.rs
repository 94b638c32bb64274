//! Diffusion-policy trajectory planning for driving.
//!
//! A conditioned DiT-style noise predictor generates ego trajectories by
//! ancestral denoising. It is trained by noise-prediction imitation on
//! scripted expert demonstrations, then fine-tuned with group-standardized
//! policy gradients whose rewards come from a non-reactive simulator scoring
//! each sampled trajectory with the PDM score.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the precision used by the training pipeline.

pub mod autodiff;
pub mod checkpoint;
pub mod conditioning;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod geometry;
pub mod il;
pub mod optim;
pub mod policy;
pub mod rl;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod scheduler;
pub mod simulator;
pub mod tensor;
pub mod traj;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Mat;

/// Precision used by the training and evaluation pipeline.
pub type Real = f64;
pub type Tensor = Mat<Real>;
pub type Schedule = scheduler::NoiseSchedule<Real>;
pub type Chain = scheduler::DiffusionChain<Real>;
