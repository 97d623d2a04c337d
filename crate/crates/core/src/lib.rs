//! Core numerics for the dual-contradistinctive generative autoencoder.
//!
//! Everything in this crate is pure computation over `alloc` containers: the
//! f32 tensor/tape engine, the convolutional encoder/decoder/discriminator
//! backbone, the loss terms (KL, reconstruction, instance-level InfoNCE with a
//! negative queue, set-level GAN), the alternating min–max training step, and
//! the evaluation math (Fréchet distance, Inception Score, perceptual path
//! length, linear probes, latent editing). File formats, dataset ingestion and
//! the CLI live in the companion `dcvae` crate.
//!
//! The crate is `no_std`-compatible (`default-features = false`); the `std`
//! feature only switches dependency internals (runtime CPU feature detection
//! in the GEMM kernels), not the API.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod fmath;
pub mod config;
pub mod image;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::{DatasetSpec, EvalSettings, ExperimentConfig, LossWeights, Mode};
pub use image::ImageBatch;
pub use rng::RngStream;
pub use tensor::Tensor;
