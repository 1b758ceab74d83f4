//! Score-distillation lab: SDS, VSD and DDS with reward-weighted variants over toy conditional
//! diffusion models.

pub mod adapter;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod harness;
pub mod mlp_denoiser;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod render;
pub mod rewards;
pub mod sample;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
