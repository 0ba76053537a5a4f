//! Compact degradation-robust conditioning encoder.
//!
//! The LQ image is split into 4x4 patches, passed through two
//! self-attention blocks and compressed by a learnable-query resampler into
//! a fixed number of context tokens. A time-conditioned adaptive layer norm
//! modulates the tokens per diffusion step, so the heavy encoding runs once
//! per image while the modulation runs once per step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::layers::{Attention, Linear};
use super::{sinusoidal_embedding, NetConfig, TIME_EMB_DIM};
use crate::tensor::{Error, Result, Rng, Tensor};

const PATCH: usize = 4;

struct EncoderBlock {
    attn: Attention,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl EncoderBlock {
    fn new(dim: usize, rng: &mut Rng) -> EncoderBlock {
        EncoderBlock {
            attn: Attention::new(dim, dim, rng),
            mlp_in: Linear::new(dim, 2 * dim, true, rng),
            mlp_out: Linear::new(2 * dim, dim, true, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attn.forward(x, x)?)?;
        let h = self.mlp_out.forward(&self.mlp_in.forward(&x.layer_norm(1e-5)?)?.silu()?)?;
        x.add(&h)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.mlp_in.collect(&format!("{prefix}.mlp_in"), out);
        self.mlp_out.collect(&format!("{prefix}.mlp_out"), out);
    }
}

pub struct CompactEncoder {
    image_size: usize,
    tokens: usize,
    dim: usize,
    patch_proj: Linear,
    pos_emb: Tensor,
    blocks: [EncoderBlock; 2],
    queries: Tensor,
    resample_attn: Attention,
    resample_mlp_in: Linear,
    resample_mlp_out: Linear,
    adaln_in: Linear,
    adaln_out: Linear,
}

impl CompactEncoder {
    pub fn new(cfg: &NetConfig, rng: &mut Rng) -> CompactEncoder {
        let dim = cfg.context_dim;
        let patches = (cfg.image_size / PATCH) * (cfg.image_size / PATCH);
        // the modulation head starts as a plain layer norm: zero weights,
        // bias = (ones for scale, zeros for shift)
        let mut adaln_out = Linear::zeroed(2 * TIME_EMB_DIM, 2 * dim, true);
        let mut bias = alloc::vec![1.0f32; dim];
        bias.extend(alloc::vec![0.0f32; dim]);
        adaln_out.b = Some(Tensor::param(&[2 * dim], bias).unwrap());
        CompactEncoder {
            image_size: cfg.image_size,
            tokens: cfg.context_tokens,
            dim,
            patch_proj: Linear::new(PATCH * PATCH, dim, true, rng),
            pos_emb: Tensor::param(&[patches, dim], {
                (0..patches * dim).map(|_| rng.next_normal() * 0.02).collect()
            })
            .unwrap(),
            blocks: [EncoderBlock::new(dim, rng), EncoderBlock::new(dim, rng)],
            queries: Tensor::param(&[cfg.context_tokens, dim], {
                (0..cfg.context_tokens * dim).map(|_| rng.next_normal() * 0.5).collect()
            })
            .unwrap(),
            resample_attn: Attention::new(dim, dim, rng),
            resample_mlp_in: Linear::new(dim, 2 * dim, true, rng),
            resample_mlp_out: Linear::new(2 * dim, dim, true, rng),
            adaln_in: Linear::new(TIME_EMB_DIM, 2 * TIME_EMB_DIM, true, rng),
            adaln_out,
        }
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Time-independent compact representation: `[tokens, dim]`.
    pub fn encode(&self, lq: &Tensor) -> Result<Tensor> {
        if lq.shape() != [1, self.image_size, self.image_size] {
            return Err(Error::ShapeMismatch {
                op: "compact_encoder",
                detail: format!(
                    "expected [1, {0}, {0}], got {1}",
                    self.image_size,
                    crate::tensor::fmt_shape(lq.shape())
                ),
            });
        }
        let mut x = self.patch_proj.forward(&lq.patchify(PATCH)?)?.add(&self.pos_emb)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let mut q = self.queries.add(&self.resample_attn.forward(&self.queries, &x)?)?;
        let h = self
            .resample_mlp_out
            .forward(&self.resample_mlp_in.forward(&q.layer_norm(1e-5)?)?.silu()?)?;
        q = q.add(&h)?;
        Ok(q)
    }

    /// Adaptive layer norm driven by the time embedding:
    /// `scale (x) LayerNorm(tokens) + shift`.
    pub fn modulate(&self, tokens: &Tensor, t: usize) -> Result<Tensor> {
        let (scale, shift) = self.time_terms(t)?;
        tokens.layer_norm(1e-5)?.mul_rows(&scale)?.add_rows(&shift)
    }

    /// `(scale, shift)` rows computed from the time embedding.
    pub fn time_terms(&self, t: usize) -> Result<(Tensor, Tensor)> {
        let emb = sinusoidal_embedding(t, TIME_EMB_DIM);
        let h = self.adaln_in.forward(&emb)?.silu()?;
        let both = self.adaln_out.forward(&h)?.reshape(&[2, self.dim])?;
        let parts = both.split(0, &[1, 1])?;
        Ok((parts[0].reshape(&[self.dim])?, parts[1].reshape(&[self.dim])?))
    }

    /// Full conditioning pass: encode then modulate.
    pub fn forward(&self, lq: &Tensor, t: usize) -> Result<Tensor> {
        self.modulate(&self.encode(lq)?, t)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.patch_proj.collect(&format!("{prefix}.patch_proj"), out);
        out.push((format!("{prefix}.pos_emb"), self.pos_emb.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.queries"), self.queries.clone()));
        self.resample_attn.collect(&format!("{prefix}.resample_attn"), out);
        self.resample_mlp_in.collect(&format!("{prefix}.resample_mlp_in"), out);
        self.resample_mlp_out.collect(&format!("{prefix}.resample_mlp_out"), out);
        self.adaln_in.collect(&format!("{prefix}.adaln_in"), out);
        self.adaln_out.collect(&format!("{prefix}.adaln_out"), out);
    }
}
