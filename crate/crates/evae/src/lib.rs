//! Autoencoder with a rectified-flow diffusion decoder.
//!
//! The encoder compresses images into continuous latents; the decoder is a
//! conditional UNet that denoises from Gaussian noise to the image in a
//! handful of Euler steps, trained with velocity matching plus perceptual
//! and adversarial trajectory-matching losses.

pub mod adversary;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flowmath;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod plot;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
