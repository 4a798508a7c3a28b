//! Toy image-to-video latent diffusion.
//!
//! A reference frame is encoded by an exactly invertible Haar codec
//! ([`codec`]) and injected into a small spatio-temporal denoiser
//! ([`denoiser`]) in two ways: as a frame mask plus condition latent
//! concatenated onto the noisy latent (9 input channels), and as semantic
//! tokens consumed by cross-attention ([`conditioning`]). The network predicts
//! `v` on a zero-terminal-SNR schedule ([`schedule`]) and is sampled with DDIM
//! and classifier-free guidance from pure Gaussian noise ([`sampler`]).
//! Training runs in two stages: a spatial backbone on single frames, then
//! temporal and input layers with the backbone frozen ([`trainer`]).

pub mod codec;
pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod toydata;
pub mod trainer;

pub use atmv_tensor::{Real, Rng, Tensor};
pub use error::{Error, Result};
