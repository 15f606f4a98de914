//! Content-motion latent video diffusion at desk scale.
//!
//! A clip is factored by an autoencoder into an image-like content frame and
//! a pair of low-dimensional motion latents; one denoiser generates content
//! frames, a second generates motion latents conditioned on a content frame,
//! and the decoder turns the pair back into a video. The crate also carries
//! the diffusion math, a synthetic data generator, checkpoint and video file
//! formats, gradient verification, and an analytic compute model.

pub mod autoencoder;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod denoisers;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod patch;
pub mod pipeline;
pub mod rng;
pub mod training;
pub mod verify;
pub mod video;

pub use cmdlab_autograd as autograd;
pub use error::{Error, Result};
