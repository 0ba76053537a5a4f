//! Pixel-space diffusion restoration, self-contained and deterministic.
//!
//! The crate hosts a small dense-tensor core with reverse-mode autodiff, a
//! variance-preserving noise schedule with deterministic DDIM stepping, a
//! compact conditioning encoder, a toy denoising UNet, a one-step preview
//! generator trained by consistency distillation, a feature aggregator with
//! spatial feature transform fusion, the preview-adaptive sampling loop, a
//! procedural dataset with a synthetic degradation pipeline, and
//! full-reference quality metrics.
//!
//! Everything is `no_std` + `alloc`: float math goes through `libm` so the
//! same seeds produce bit-identical results on every platform. IO, file
//! formats and the command-line front end live in the companion `previr`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod aggregator;
pub mod data;
pub mod diffusion;
pub mod metrics;
pub mod nets;
pub mod previewer;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use tensor::{Error, Result, Rng, Tensor};
