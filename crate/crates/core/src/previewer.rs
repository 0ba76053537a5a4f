//! One-step restoration previews via a consistency-distilled adapter.
//!
//! The previewer is the base denoiser with its low-rank adapter enabled and
//! the class branch pinned to the null class: it decodes the current latent
//! into an x0 estimate in a single forward pass. Distillation trains the
//! adapter so that previews stay consistent along teacher trajectories,
//! with gradients flowing only through the earlier-step branch.

use alloc::format;

use crate::data::ImagePair;
use crate::diffusion::{add_noise, ddim_step, x0_from_eps, NoiseSchedule};
use crate::metrics::mean_sq_diff;
use crate::nets::{ClassEmbedding, CompactEncoder, DenoiserNet};
use crate::tensor::{Error, Result, Rng, Tensor};

/// One-step x0 estimate from the adapter-enabled denoiser, conditioned only
/// on the compact LQ context (`ctx` already modulated for `t`). Values are
/// clamped to the data range.
pub fn preview(
    denoiser: &DenoiserNet,
    class_emb: &ClassEmbedding,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    t: usize,
    ctx: &Tensor,
) -> Result<Tensor> {
    if !denoiser.adapter_enabled() {
        return Err(Error::InvalidArgument {
            op: "preview",
            detail: "previewer adapter is disabled; refusing to preview with the base model".into(),
        });
    }
    let null_tokens = class_emb.tokens(class_emb.null_id())?;
    let eps = denoiser.forward(z_t, t, &null_tokens, ctx, None, 0.0)?;
    x0_from_eps(z_t, &eps, t, schedule)?.clamp(-1.0, 1.0)
}

/// One consistency-distillation item: a forward-process latent at step `s`
/// and the teacher's DDIM target at the adjacent grid step `t < s`.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub z_s: Tensor,
    pub s: usize,
    pub z_t: Tensor,
    pub t: usize,
    /// Time-independent compact context of the LQ image.
    pub raw_ctx: Tensor,
}

/// One deterministic DDIM step of the base model (adapter off) under full
/// conditioning, from `z_s` at grid step `s` to the next grid step down.
/// The result is detached: the teacher is the distillation target.
pub fn teacher_step(
    denoiser: &DenoiserNet,
    encoder: &CompactEncoder,
    class_emb: &ClassEmbedding,
    schedule: &NoiseSchedule,
    grid: &[usize],
    z_s: &Tensor,
    s: usize,
    raw_ctx: &Tensor,
    class_id: usize,
) -> Result<(Tensor, usize)> {
    if denoiser.adapter_enabled() {
        return Err(Error::InvalidArgument {
            op: "teacher_step",
            detail: "adapter must be disabled for the teacher".into(),
        });
    }
    let pos = grid.iter().position(|&g| g == s).ok_or(Error::InvalidArgument {
        op: "teacher_step",
        detail: format!("step {s} is not on the inference grid"),
    })?;
    if pos + 1 >= grid.len() {
        return Err(Error::InvalidArgument {
            op: "teacher_step",
            detail: format!("step {s} is the grid bottom"),
        });
    }
    let t = grid[pos + 1];
    let ctx = encoder.modulate(raw_ctx, s)?;
    let eps = denoiser.forward(z_s, s, &class_emb.tokens(class_id)?, &ctx, None, 0.0)?;
    let x0 = x0_from_eps(z_s, &eps, s, schedule)?;
    Ok((ddim_step(z_s, &x0, s, t, schedule)?.detach(), t))
}

/// Builds a distillation item from an image pair: `z_s` by forward noising
/// at a random grid step, `z_t` by one teacher step.
pub fn prepare_distill_batch(
    denoiser: &DenoiserNet,
    encoder: &CompactEncoder,
    class_emb: &ClassEmbedding,
    schedule: &NoiseSchedule,
    grid: &[usize],
    pair: &ImagePair,
    rng: &mut Rng,
) -> Result<DistillBatch> {
    let raw_ctx = encoder.encode(&pair.lq)?.detach();
    let idx = rng.next_below(grid.len() - 1);
    let s = grid[idx];
    let sample = add_noise(&pair.hq, s, schedule, rng)?;
    let z_s = sample.z_t.detach();
    let (z_t, t) = denoiser.with_adapter(false, |d| {
        teacher_step(d, encoder, class_emb, schedule, grid, &z_s, s, &raw_ctx, pair.class_id)
    })?;
    Ok(DistillBatch { z_s, s, z_t, t, raw_ctx })
}

/// Consistency loss between the preview at `(z_s, s)` and the detached
/// preview at the teacher target `(z_t, t)`.
pub fn distill_loss(
    denoiser: &DenoiserNet,
    encoder: &CompactEncoder,
    class_emb: &ClassEmbedding,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
) -> Result<Tensor> {
    if batch.t >= batch.s {
        return Err(Error::InvalidArgument {
            op: "distill_loss",
            detail: format!("target step {} must lie below source step {}", batch.t, batch.s),
        });
    }
    denoiser.with_adapter(true, |d| {
        let ctx_s = encoder.modulate(&batch.raw_ctx, batch.s)?;
        let student = preview(d, class_emb, schedule, &batch.z_s, batch.s, &ctx_s)?;
        let ctx_t = encoder.modulate(&batch.raw_ctx, batch.t)?;
        let target = preview(d, class_emb, schedule, &batch.z_t, batch.t, &ctx_t)?.detach();
        student.sub(&target)?.square()?.mean()
    })
}

/// Mean squared preview inconsistency along teacher trajectories over a
/// held-out set; drops as distillation converges.
pub fn self_consistency(
    denoiser: &DenoiserNet,
    encoder: &CompactEncoder,
    class_emb: &ClassEmbedding,
    schedule: &NoiseSchedule,
    grid: &[usize],
    pairs: &[ImagePair],
    seed: u64,
) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument { op: "self_consistency", detail: "empty evaluation set".into() });
    }
    let root = Rng::new(seed);
    let mut acc = 0.0f64;
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = root.derive(i as u64);
        let batch = prepare_distill_batch(denoiser, encoder, class_emb, schedule, grid, pair, &mut rng)?;
        let gap = denoiser.with_adapter(true, |d| {
            let ctx_s = encoder.modulate(&batch.raw_ctx, batch.s)?;
            let p_s = preview(d, class_emb, schedule, &batch.z_s, batch.s, &ctx_s)?;
            let ctx_t = encoder.modulate(&batch.raw_ctx, batch.t)?;
            let p_t = preview(d, class_emb, schedule, &batch.z_t, batch.t, &ctx_t)?;
            mean_sq_diff(&p_s, &p_t)
        })?;
        acc += gap as f64;
    }
    Ok((acc / pairs.len() as f64) as f32)
}
