//! Feature aggregator: encodes the preview/LQ pair into multi-level
//! residuals for the denoiser decoder.
//!
//! The two images are concatenated along the height axis and run through a
//! trainable copy of the denoiser compression path (class cross-attention
//! dropped; the joint self-attention is what mixes the two streams). At
//! each level the map splits back into a preview half and an LQ half, the
//! LQ half predicts spatial-feature-transform coefficients, and the fused
//! features pass through a zero-initialized projection, so a fresh
//! aggregator emits exactly zero.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::diffusion::NoiseSchedule;
use crate::nets::layers::{from_tokens, to_tokens, Attention, Conv2d, Linear, ResBlock};
use crate::nets::{sinusoidal_embedding, DenoiserNet, NetConfig, TIME_EMB_DIM};
use crate::tensor::{Error, Result, Rng, Tensor};

/// Concatenates preview and LQ along the height axis: two `[1, n, n]` maps
/// become `[1, 2n, n]`.
pub fn spatial_concat(preview: &Tensor, lq: &Tensor) -> Result<Tensor> {
    if preview.shape() != lq.shape() {
        return Err(Error::ShapeMismatch {
            op: "spatial_concat",
            detail: format!(
                "{} vs {}",
                crate::tensor::fmt_shape(preview.shape()),
                crate::tensor::fmt_shape(lq.shape())
            ),
        });
    }
    Tensor::concat(&[preview, lq], 1)
}

/// Exact inverse of [`spatial_concat`].
pub fn spatial_split(joint: &Tensor) -> Result<(Tensor, Tensor)> {
    let h = joint.shape().get(1).copied().unwrap_or(0);
    if h % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "spatial_split",
            detail: format!("height {h} is odd"),
        });
    }
    let parts = joint.split(1, &[h / 2, h / 2])?;
    Ok((parts[0].clone(), parts[1].clone()))
}

/// Predicts the per-level SFT coefficients `(alpha, beta)` from the LQ
/// stream.
pub struct SftHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl SftHead {
    pub fn new(channels: usize, rng: &mut Rng) -> SftHead {
        SftHead { conv1: Conv2d::new(channels, channels, 1, rng), conv2: Conv2d::new(channels, 2 * channels, 1, rng) }
    }

    /// `(alpha, beta)`, each shaped like the input map.
    pub fn coefficients(&self, h_o: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = h_o.shape()[0];
        let both = self.conv2.forward(&self.conv1.forward(h_o)?.silu()?)?;
        let parts = both.split(0, &[c, c])?;
        Ok((parts[0].clone(), parts[1].clone()))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
    }
}

/// Spatial feature transform: `(1 + alpha) (x) h_p + beta` with the
/// coefficients predicted from `h_o`.
pub fn sft_fuse(h_p: &Tensor, h_o: &Tensor, head: &SftHead) -> Result<Tensor> {
    if h_p.shape() != h_o.shape() {
        return Err(Error::ShapeMismatch {
            op: "sft_fuse",
            detail: format!(
                "{} vs {}",
                crate::tensor::fmt_shape(h_p.shape()),
                crate::tensor::fmt_shape(h_o.shape())
            ),
        });
    }
    let (alpha, beta) = head.coefficients(h_o)?;
    alpha.add_scalar(1.0)?.mul(h_p)?.add(&beta)
}

struct SelfAttnStage {
    attn: Attention,
}

impl SelfAttnStage {
    fn forward(&self, map: &Tensor) -> Result<Tensor> {
        let [c, h, w] = [map.shape()[0], map.shape()[1], map.shape()[2]];
        let tokens = to_tokens(map)?;
        let tokens = tokens.add(&self.attn.forward(&tokens, &tokens)?)?;
        from_tokens(&tokens, c, h, w)
    }
}

/// Trainable copy of the denoiser compression path plus SFT fusion heads
/// and zero-initialized output projections.
pub struct AggregatorNet {
    cfg: NetConfig,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    enc1_res: ResBlock,
    enc1_attn: SelfAttnStage,
    down1: Conv2d,
    enc2_res: ResBlock,
    enc2_attn: SelfAttnStage,
    down2: Conv2d,
    mid_res: ResBlock,
    mid_attn: SelfAttnStage,
    sft: [SftHead; 3],
    out_proj: [Conv2d; 3],
}

impl AggregatorNet {
    /// Initializes from a trained denoiser: conv stages, self-attention and
    /// the time MLP are weight copies; SFT heads are fresh; output
    /// projections start at zero.
    pub fn from_denoiser(denoiser: &DenoiserNet, rng: &mut Rng) -> AggregatorNet {
        let cfg = denoiser.cfg.clone();
        let [c1, c2, c3] = cfg.level_channels();
        let copy = denoiser.compression_copy();
        AggregatorNet {
            cfg,
            time_in: copy.time_in,
            time_out: copy.time_out,
            conv_in: copy.conv_in,
            enc1_res: copy.enc1_res,
            enc1_attn: SelfAttnStage { attn: copy.enc1_self },
            down1: copy.down1,
            enc2_res: copy.enc2_res,
            enc2_attn: SelfAttnStage { attn: copy.enc2_self },
            down2: copy.down2,
            mid_res: copy.mid_res,
            mid_attn: SelfAttnStage { attn: copy.mid_self },
            sft: [SftHead::new(c1, rng), SftHead::new(c2, rng), SftHead::new(c3, rng)],
            out_proj: [Conv2d::zeroed(c1, c1, 1), Conv2d::zeroed(c2, c2, 1), Conv2d::zeroed(c3, c3, 1)],
        }
    }

    fn time_embed(&self, t: usize) -> Result<Tensor> {
        self.time_out.forward(&self.time_in.forward(&sinusoidal_embedding(t, TIME_EMB_DIM))?.silu()?)
    }

    /// Encodes the preview/LQ pair into one residual per decoder level,
    /// full resolution first.
    pub fn aggregate(&self, preview: &Tensor, lq: &Tensor, t: usize) -> Result<[Tensor; 3]> {
        let n = self.cfg.image_size;
        if preview.shape() != [1, n, n] {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                detail: format!("expected [1, {n}, {n}] inputs, got {}", crate::tensor::fmt_shape(preview.shape())),
            });
        }
        let joint = spatial_concat(preview, lq)?;
        let temb = self.time_embed(t)?;

        let l1 = self.enc1_attn.forward(&self.enc1_res.forward(&self.conv_in.forward(&joint)?, &temb)?)?;
        let l2 = self.enc2_attn.forward(&self.enc2_res.forward(&self.down1.forward(&l1)?, &temb)?)?;
        let l3 = self.mid_attn.forward(&self.mid_res.forward(&self.down2.forward(&l2)?, &temb)?)?;

        let mut residuals = Vec::with_capacity(3);
        for (i, level) in [l1, l2, l3].into_iter().enumerate() {
            let (h_p, h_o) = spatial_split(&level)?;
            let fused = sft_fuse(&h_p, &h_o, &self.sft[i])?;
            residuals.push(self.out_proj[i].forward(&fused)?);
        }
        let mut it = residuals.into_iter();
        Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.time_in.collect(&format!("{prefix}.time_in"), out);
        self.time_out.collect(&format!("{prefix}.time_out"), out);
        self.conv_in.collect(&format!("{prefix}.conv_in"), out);
        self.enc1_res.collect(&format!("{prefix}.enc1_res"), out);
        self.enc1_attn.attn.collect(&format!("{prefix}.enc1_self"), out);
        self.down1.collect(&format!("{prefix}.down1"), out);
        self.enc2_res.collect(&format!("{prefix}.enc2_res"), out);
        self.enc2_attn.attn.collect(&format!("{prefix}.enc2_self"), out);
        self.down2.collect(&format!("{prefix}.down2"), out);
        self.mid_res.collect(&format!("{prefix}.mid_res"), out);
        self.mid_attn.attn.collect(&format!("{prefix}.mid_self"), out);
        for (i, head) in self.sft.iter().enumerate() {
            head.collect(&format!("{prefix}.sft{i}"), out);
        }
        for (i, proj) in self.out_proj.iter().enumerate() {
            proj.collect(&format!("{prefix}.out_proj{i}"), out);
        }
    }
}

/// Re-noises a preview to the marginal of step `t`; used only by the
/// noisy-preview ablation.
pub fn noisy_preview_variant(
    preview: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    if t > schedule.steps() {
        return Err(Error::InvalidArgument {
            op: "noisy_preview",
            detail: format!("step {t} outside grid [0, {}]", schedule.steps()),
        });
    }
    let noise = Tensor::randn(preview.shape(), rng);
    preview.mul_scalar(schedule.alpha(t))?.add(&noise.mul_scalar(schedule.beta(t))?)
}
