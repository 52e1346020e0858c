//! Frequency-decoupled diffusion denoising of low-dose fan-beam CT
//! sinograms.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod frequency;
pub mod geometry;
pub mod metrics;
pub mod recon;
pub mod seeds;
pub mod tensor_io;
pub mod training;

pub use error::{Error, Result};
