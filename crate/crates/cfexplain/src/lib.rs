//! Counterfactual explanation of black-box image classifiers through a
//! diffusion autoencoder's semantic latent space.
//!
//! The pipeline distills a trained classifier (the teacher) into a two-layer
//! affine agent over concatenated semantic codes, takes the agent's exact
//! class-score gradient as a latent manipulation direction, decodes
//! manipulated codes back to images with deterministic DDIM sampling, and
//! quantifies the result: reconstruction quality, agent/teacher alignment,
//! manipulation validity, and heatmap observability against ground-truth
//! feature masks of a synthetic benchmark.
//!
//! Entry points by capability:
//! - [`schedule`]: variance schedules and forward noising
//! - [`diffae`]: semantic encoder, conditional denoiser, DDIM decode/invert
//! - [`teacher`]: the black-box classifier being explained
//! - [`agent`]: distilled affine agent and closed-form manipulation directions
//! - [`counterfactual`]: latent manipulation, counterfactual decoding, heatmaps
//! - [`eval`]: PSNR/SSIM, alignment metrics, validity, observability
//! - [`data`]: synthetic benchmark generator with ground-truth masks
//! - [`cli`]: the `cfexplain` command-line pipeline
//!
//! The `examples/` directory holds one runnable walkthrough per capability.

pub mod agent;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod counterfactual;
pub mod data;
pub mod diffae;
pub mod error;
pub mod eval;
pub mod imgops;
pub mod nn;
pub mod render;
pub mod schedule;
pub mod teacher;

pub use error::{Error, Result};
