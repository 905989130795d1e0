//! Probabilistic multivariate time-series forecasting with a denoising
//! diffusion model conditioned on latent temporal dynamics.
//!
//! A temporal convolutional network summarizes the context window into a
//! latent vector; a transformer-plus-residual denoiser predicts the noise at
//! each diffusion step conditioned on that latent and the step embedding.
//! Forecast uncertainty is quantified by sampling ensembles through the
//! reverse process and scoring them with CRPS/MAE/MSE.
//!
//! Everything runs on a small built-in reverse-mode differentiation substrate
//! ([`tape`]) whose gradients are verified against central finite
//! differences ([`gradcheck`]).
//!
//! The `examples/` directory has one runnable program per capability:
//!
//! - `noise_schedule` - build the default schedule and inspect its limits
//! - `gradient_check` - finite-difference verification of the networks
//! - `synthesize_data` - the synthetic series generators
//! - `train_forecaster` - train a small model end to end
//! - `forecast_ensemble` - sample an ensemble and print quantiles
//! - `evaluate_crps` - conditional vs. unconditional baseline comparison
//! - `iterative_rollout` - forecast beyond the trained horizon
//!
//! The same pipeline is scriptable through the `dyndiff` binary
//! (`train` / `forecast` / `evaluate` / `hist` / `synth`).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod forecasting;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
