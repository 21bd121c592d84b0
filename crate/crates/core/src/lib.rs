//! Sequence-adaptive video prediction by optimising the sampling noise of a
//! small latent diffusion model against a live stream of observations.

pub mod config;
pub mod data;
pub mod diffcore;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod models;
pub mod noiseopt;
pub mod optim;
pub mod pipeline;
pub mod stream;

pub use error::{Error, Result};
