//! Network architecture: shared layers, the compact conditioning encoder
//! and the denoising UNet.

use alloc::vec::Vec;

use crate::tensor::Tensor;

pub mod layers;

mod context;
mod denoiser;

pub use context::CompactEncoder;
pub use denoiser::{ClassEmbedding, DenoiserNet, DualCrossAttnBlock};

/// Width of the raw sinusoidal time embedding consumed by the time MLPs.
pub const TIME_EMB_DIM: usize = 32;

/// Architecture hyper-parameters shared by every network in the pipeline.
#[derive(Debug, Clone)]
pub struct NetConfig {
    /// Square image extent; must be divisible by 4.
    pub image_size: usize,
    /// UNet channel width at full resolution; levels use `{C, 2C, 4C}`.
    pub base_channels: usize,
    /// Width of conditioning tokens (class and compact LQ context).
    pub context_dim: usize,
    /// Number of resampled LQ context tokens.
    pub context_tokens: usize,
    /// Shape classes; the embedding reserves one extra null class.
    pub class_count: usize,
    /// Tokens per class label.
    pub class_token_len: usize,
    /// Rank of the preview adapter.
    pub lora_rank: usize,
    /// Scale applied to the adapter delta.
    pub lora_scale: f32,
    /// LQ cross-attention weight per level (full, half, quarter resolution).
    pub lq_attn_weight: [f32; 3],
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 24,
            base_channels: 32,
            context_dim: 64,
            context_tokens: 8,
            class_count: crate::data::NUM_CLASSES,
            class_token_len: 4,
            lora_rank: 4,
            lora_scale: 1.0,
            lq_attn_weight: [1.0; 3],
        }
    }
}

impl NetConfig {
    /// A deliberately small configuration for unit tests.
    pub fn tiny() -> Self {
        NetConfig {
            image_size: 8,
            base_channels: 6,
            context_dim: 8,
            context_tokens: 2,
            class_count: crate::data::NUM_CLASSES,
            class_token_len: 2,
            lora_rank: 2,
            lora_scale: 1.0,
            lq_attn_weight: [1.0; 3],
        }
    }

    pub fn level_channels(&self) -> [usize; 3] {
        [self.base_channels, 2 * self.base_channels, 4 * self.base_channels]
    }

    pub fn time_hidden(&self) -> usize {
        4 * self.base_channels
    }
}

/// Sinusoidal embedding of an integer time-step as a `[1, dim]` row.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = libm::expf(-libm::logf(10_000.0) * i as f32 / (half - 1).max(1) as f32);
        data.push(libm::sinf(t as f32 * freq));
    }
    for i in 0..half {
        let freq = libm::expf(-libm::logf(10_000.0) * i as f32 / (half - 1).max(1) as f32);
        data.push(libm::cosf(t as f32 * freq));
    }
    Tensor::from_vec(&[1, dim], data).expect("embedding construction cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_embedding_distinguishes_steps() {
        let a = sinusoidal_embedding(3, TIME_EMB_DIM);
        let b = sinusoidal_embedding(200, TIME_EMB_DIM);
        assert_eq!(a.shape(), &[1, TIME_EMB_DIM]);
        let gap: f32 = a
            .to_vec()
            .iter()
            .zip(b.to_vec())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(gap > 0.1, "embeddings too close: {gap}");
    }
}
