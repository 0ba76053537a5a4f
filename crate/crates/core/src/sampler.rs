//! The inference engine: classifier-free guidance, the preview-adaptive
//! restoration loop and its ablation modes, and creative restoration with
//! a late aggregator cutoff.
//!
//! One run is strictly sequential: the quality indicator computed at step
//! `i` gates the aggregator residuals at step `i + 1`. Independent runs are
//! free to execute in parallel with per-run generators.

use alloc::format;
use alloc::vec::Vec;

use crate::aggregator::{noisy_preview_variant, AggregatorNet};
use crate::diffusion::{ddim_step, inference_grid, x0_from_eps, NoiseSchedule};
use crate::metrics::mean_sq_diff;
use crate::nets::{ClassEmbedding, CompactEncoder, DenoiserNet};
use crate::previewer::preview;
use crate::tensor::{Error, Result, Rng, Tensor};

/// Everything the sampler needs. The aggregator is optional so earlier
/// training phases can run the reference-free modes.
pub struct RestorationNets {
    pub denoiser: DenoiserNet,
    pub encoder: CompactEncoder,
    pub class_emb: ClassEmbedding,
    pub aggregator: Option<AggregatorNet>,
}

impl RestorationNets {
    /// Clears gradient tracking on every parameter. Forward passes then
    /// record no graph, which is the fast path for pure evaluation.
    pub fn freeze(&self) {
        for (_, p) in self.named_params() {
            p.set_requires_grad(false);
        }
    }

    pub fn named_params(&self) -> Vec<(alloc::string::String, Tensor)> {
        let mut out = Vec::new();
        self.denoiser.collect_params("denoiser", &mut out);
        self.denoiser.collect_adapter_params("denoiser", &mut out);
        self.encoder.collect_params("encoder", &mut out);
        self.class_emb.collect_params("class_emb", &mut out);
        if let Some(agg) = &self.aggregator {
            agg.collect_params("aggregator", &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Full adaptive loop: previews, aggregator, quality indicator.
    Adaptive,
    /// Previews and aggregator active, gate pinned (no indicator).
    FixedGate,
    /// No previews, no aggregator: plain conditional guided sampling.
    NoReference,
    /// Previews re-noised to the current marginal before aggregation.
    NoisyPreview,
}

impl SamplerMode {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerMode::Adaptive => "adares",
            SamplerMode::FixedGate => "fixed",
            SamplerMode::NoReference => "no_reference",
            SamplerMode::NoisyPreview => "noisy_preview",
        }
    }

    pub fn parse(s: &str) -> Result<SamplerMode> {
        match s {
            "adares" => Ok(SamplerMode::Adaptive),
            "fixed" => Ok(SamplerMode::FixedGate),
            "no_reference" => Ok(SamplerMode::NoReference),
            "noisy_preview" => Ok(SamplerMode::NoisyPreview),
            other => {
                Err(Error::InvalidArgument { op: "sampler_mode", detail: format!("unknown mode '{other}'") })
            }
        }
    }
}

/// Class override and aggregator cutoff for creative restoration. The
/// aggregator is disabled during the final `cutoff` steps of the loop.
#[derive(Debug, Clone, Copy)]
pub struct CreativeSpec {
    pub target_class: usize,
    pub cutoff: usize,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Number of denoiser evaluations (inference grid size).
    pub steps: usize,
    pub cfg_scale: f32,
    /// The quality indicator is forced to zero for the final `eta_cutoff`
    /// steps.
    pub eta_cutoff: usize,
    pub mode: SamplerMode,
    pub creative: Option<CreativeSpec>,
    pub delta_max: f32,
    pub seed: u64,
    /// Retain preview/denoising-mean snapshots in the log.
    pub snapshots: bool,
    /// Whether the unconditional guidance branch keeps aggregator
    /// residuals (it always drops class and LQ context).
    pub uncond_keeps_residuals: bool,
    /// Diagnostic hook: replaces the indicator value on active steps.
    pub delta_override: Option<f32>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 30,
            cfg_scale: 7.0,
            eta_cutoff: 4,
            mode: SamplerMode::Adaptive,
            creative: None,
            delta_max: 5.0,
            seed: 0,
            snapshots: false,
            uncond_keeps_residuals: true,
            delta_override: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta_cutoff >= self.steps {
            return Err(Error::InvalidArgument {
                op: "sampler_config",
                detail: format!("eta cutoff {} must be below steps {}", self.eta_cutoff, self.steps),
            });
        }
        if let Some(c) = &self.creative {
            if c.cutoff >= self.steps {
                return Err(Error::InvalidArgument {
                    op: "sampler_config",
                    detail: format!("creative cutoff {} must be below steps {}", c.cutoff, self.steps),
                });
            }
        }
        Ok(())
    }
}

/// Per-step record of the sampling loop.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    /// Mean squared distance between preview and denoising mean.
    pub dist_preview_mean: f32,
    /// Mean squared distance between consecutive previews.
    pub dist_temporal: f32,
    /// Quality indicator computed at this step (gates the next step).
    pub delta: f32,
}

/// Full log of one sampling run; snapshots hold raw `(preview, denoising
/// mean)` buffers when enabled.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Classifier-free guidance combination: `uncond + s * (cond - uncond)`.
pub fn cfg_eps(cond: &Tensor, uncond: &Tensor, scale: f32) -> Result<Tensor> {
    uncond.add(&cond.sub(uncond)?.mul_scalar(scale)?)
}

/// Input-quality indicator: squared preview-to-mean distance over squared
/// preview temporal difference, clamped to `[0, delta_max]`. A vanishing
/// denominator saturates at the clamp.
pub fn delta_indicator(psi_hat: &Tensor, z_hat: &Tensor, psi_prev: &Tensor, delta_max: f32) -> Result<f32> {
    let num = mean_sq_diff(psi_hat, z_hat)? as f64;
    let den = mean_sq_diff(psi_hat, psi_prev)? as f64;
    if den < 1e-12 {
        return Ok(delta_max);
    }
    Ok(((num / den) as f32).clamp(0.0, delta_max))
}

fn ensure_finite(t: &Tensor, step: usize) -> Result<()> {
    let ok = t.with_data(|d| d.iter().all(|v| v.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(Error::NonFiniteAtStep { step })
    }
}

/// Restores an LQ image with the configured sampling mode. Returns the
/// final estimate clamped to the data range and the per-step log.
pub fn sample_restore(
    nets: &RestorationNets,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    lq: &Tensor,
    class_id: usize,
    rng: &mut Rng,
) -> Result<(Tensor, TrajectoryLog)> {
    cfg.validate()?;
    let grid = inference_grid(schedule.steps(), cfg.steps)?;
    let k = cfg.steps;
    let needs_previews = cfg.mode != SamplerMode::NoReference;
    let aggregator = match (&nets.aggregator, needs_previews) {
        (Some(agg), true) => Some(agg),
        (None, true) => {
            return Err(Error::InvalidArgument {
                op: "sample",
                detail: format!("mode '{}' requires a trained aggregator", cfg.mode.name()),
            })
        }
        (_, false) => None,
    };
    let cond_class = cfg.creative.map(|c| c.target_class).unwrap_or(class_id);
    let cond_tokens = nets.class_emb.tokens(cond_class)?;
    let null_tokens = nets.class_emb.tokens(nets.class_emb.null_id())?;
    let raw_ctx = nets.encoder.encode(lq)?.detach();
    let zero_ctx = Tensor::zeros(&[nets.encoder.token_count(), nets.encoder.dim()]);

    let beta_top = schedule.beta(*grid.first().unwrap());
    let mut z = Tensor::randn(lq.shape(), rng).mul_scalar(beta_top)?;
    let mut psi_prev = Tensor::zeros(lq.shape());
    let mut delta = 1.0f32;
    let mut log = TrajectoryLog::default();

    for i in 0..k {
        let t = grid[i];
        let t_next = grid[i + 1];
        ensure_finite(&z, i)?;

        let ctx = nets.encoder.modulate(&raw_ctx, t)?.detach();

        let psi_hat = if needs_previews {
            let p = nets.denoiser.with_adapter(true, |d| {
                preview(d, &nets.class_emb, schedule, &z, t, &ctx)
            })?;
            Some(p.detach())
        } else {
            None
        };

        let creative_off = cfg.creative.map(|c| i >= k - c.cutoff).unwrap_or(false);
        let residuals = match (aggregator, &psi_hat) {
            (Some(agg), Some(psi)) if !creative_off => {
                let reference = if cfg.mode == SamplerMode::NoisyPreview {
                    noisy_preview_variant(psi, t, schedule, rng)?
                } else {
                    psi.clone()
                };
                let res = agg.aggregate(&reference, lq, t)?;
                Some([res[0].detach(), res[1].detach(), res[2].detach()])
            }
            _ => None,
        };

        let eps_c = nets.denoiser.forward(&z, t, &cond_tokens, &ctx, residuals.as_ref(), delta)?;
        let uncond_res = if cfg.uncond_keeps_residuals { residuals.as_ref() } else { None };
        let eps_u = nets.denoiser.forward(&z, t, &null_tokens, &zero_ctx, uncond_res, delta)?;
        let eps = cfg_eps(&eps_c, &eps_u, cfg.cfg_scale)?;
        // the denoising mean estimates an image, so it is projected onto the
        // data range; without this, guidance extrapolation at small alpha
        // blows up both the DDIM update and the quality indicator
        let z_hat = x0_from_eps(&z, &eps, t, schedule)?.clamp(-1.0, 1.0)?.detach();
        ensure_finite(&z_hat, i)?;

        let (dist_pm, dist_tmp) = match &psi_hat {
            Some(psi) => (mean_sq_diff(psi, &z_hat)?, mean_sq_diff(psi, &psi_prev)?),
            None => (0.0, 0.0),
        };

        let active = i < k - cfg.eta_cutoff;
        delta = match (cfg.mode, &psi_hat) {
            (SamplerMode::NoReference, _) => 0.0,
            (SamplerMode::FixedGate, _) => {
                if active {
                    1.0
                } else {
                    0.0
                }
            }
            (_, Some(psi)) => {
                if active {
                    match cfg.delta_override {
                        Some(v) => v,
                        None => delta_indicator(psi, &z_hat, &psi_prev, cfg.delta_max)?,
                    }
                } else {
                    0.0
                }
            }
            (_, None) => 0.0,
        };

        log.records.push(StepRecord { step: i, t, dist_preview_mean: dist_pm, dist_temporal: dist_tmp, delta });
        if cfg.snapshots {
            let psi_snapshot =
                psi_hat.as_ref().map(|p| p.to_vec()).unwrap_or_else(|| alloc::vec![0.0; z_hat.numel()]);
            log.snapshots.push((psi_snapshot, z_hat.to_vec()));
        }

        if let Some(psi) = psi_hat {
            psi_prev = psi;
        }
        z = ddim_step(&z, &z_hat, t, t_next, schedule)?.detach();
    }
    ensure_finite(&z, k)?;
    Ok((z.clamp(-1.0, 1.0)?, log))
}

/// Creative restoration: the class condition is replaced by `target_class`
/// and the aggregator is disabled for the final `cutoff` steps.
pub fn sample_creative(
    nets: &RestorationNets,
    schedule: &NoiseSchedule,
    base: &SamplerConfig,
    lq: &Tensor,
    target_class: usize,
    cutoff: usize,
    rng: &mut Rng,
) -> Result<(Tensor, TrajectoryLog)> {
    let mut cfg = base.clone();
    cfg.creative = Some(CreativeSpec { target_class, cutoff });
    sample_restore(nets, schedule, &cfg, lq, target_class, rng)
}
