//! Training loops for the three phases: joint denoiser + conditioning
//! training, adapter distillation, and aggregator training.
//!
//! Each trainer owns its optimizer and a step counter; the per-step
//! generator derives from `(seed, phase, step)`, so resuming from a
//! checkpoint continues the exact stream an uninterrupted run would have
//! used.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{generate_pair, ManifestRow};
use crate::diffusion::{add_noise, diffusion_loss, inference_grid, NoiseSchedule};
use crate::previewer::{distill_loss, prepare_distill_batch, preview};
use crate::sampler::RestorationNets;
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::{zero_grads, Error, Result, Rng, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub lq_dropout: f32,
    pub class_dropout: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 16,
            lq_dropout: 0.15,
            class_dropout: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// FNV-1a fingerprint over parameter names and exact bit patterns; frozen
/// modules must keep theirs across later phases.
pub fn param_fingerprint(params: &[(String, Tensor)]) -> u64 {
    let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
    let mut eat = |byte: u8| {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    };
    for (name, tensor) in params {
        for b in name.as_bytes() {
            eat(*b);
        }
        tensor.with_data(|d| {
            for v in d {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        });
    }
    hash
}

fn mean_loss(losses: Vec<Tensor>) -> Result<Tensor> {
    let mut it = losses.into_iter();
    let first = it.next().ok_or(Error::InvalidArgument { op: "train", detail: "empty batch".into() })?;
    let mut acc = first;
    let mut n = 1usize;
    for l in it {
        acc = acc.add(&l)?;
        n += 1;
    }
    acc.mul_scalar(1.0 / n as f32)
}

fn train_rows(rows: &[ManifestRow]) -> Result<&[ManifestRow]> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument { op: "train", detail: "no training rows".into() });
    }
    Ok(rows)
}

/// The parameter set optimized in phase 1, in optimizer order.
pub fn stage1_named_params(nets: &RestorationNets) -> Vec<(String, Tensor)> {
    let mut named = Vec::new();
    nets.denoiser.collect_params("denoiser", &mut named);
    nets.encoder.collect_params("encoder", &mut named);
    nets.class_emb.collect_params("class_emb", &mut named);
    named
}

/// The adapter matrices optimized during distillation, in optimizer order.
pub fn adapter_named_params(nets: &RestorationNets) -> Vec<(String, Tensor)> {
    let mut named = Vec::new();
    nets.denoiser.collect_adapter_params("denoiser", &mut named);
    named
}

/// The aggregator parameters optimized in phase 2, in optimizer order.
pub fn aggregator_named_params(nets: &RestorationNets) -> Vec<(String, Tensor)> {
    let mut named = Vec::new();
    if let Some(agg) = &nets.aggregator {
        agg.collect_params("aggregator", &mut named);
    }
    named
}

/// Phase 1: denoiser, compact encoder and class embeddings trained jointly
/// with the noise-prediction loss, under conditional dropout on both the
/// LQ context and the class label.
pub struct Stage1Trainer {
    params: Vec<Tensor>,
    opt: AdamW,
    cfg: TrainConfig,
    pub step: usize,
}

const STAGE1_STREAM: u64 = 0x5331;
const DISTILL_STREAM: u64 = 0x5044;
const STAGE2_STREAM: u64 = 0x5332;

impl Stage1Trainer {
    pub fn new(nets: &RestorationNets, cfg: TrainConfig, start_step: usize) -> Stage1Trainer {
        let params: Vec<Tensor> =
            stage1_named_params(nets).into_iter().map(|(_, t)| t).collect();
        let opt = AdamW::new(&params, cfg.adamw());
        Stage1Trainer { params, opt, cfg, step: start_step }
    }

    pub fn optimizer(&mut self) -> &mut AdamW {
        &mut self.opt
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn step(&mut self, nets: &RestorationNets, schedule: &NoiseSchedule, rows: &[ManifestRow]) -> Result<f32> {
        let rows = train_rows(rows)?;
        let root = Rng::new(self.cfg.seed).derive(STAGE1_STREAM).derive(self.step as u64);
        let mut losses = Vec::with_capacity(self.cfg.batch_size);
        for b in 0..self.cfg.batch_size {
            let mut rng = root.derive(b as u64);
            let row = &rows[rng.next_below(rows.len())];
            let pair = generate_pair(row)?;
            let t = 1 + rng.next_below(schedule.steps());
            let sample = add_noise(&pair.hq, t, schedule, &mut rng)?;
            let ctx = if rng.next_bool(self.cfg.lq_dropout) {
                Tensor::zeros(&[nets.encoder.token_count(), nets.encoder.dim()])
            } else {
                nets.encoder.forward(&pair.lq, t)?
            };
            let class_id = if rng.next_bool(self.cfg.class_dropout) {
                nets.class_emb.null_id()
            } else {
                pair.class_id
            };
            let eps_hat =
                nets.denoiser.forward(&sample.z_t, t, &nets.class_emb.tokens(class_id)?, &ctx, None, 0.0)?;
            losses.push(diffusion_loss(&eps_hat, &sample.eps)?);
        }
        let loss = mean_loss(losses)?;
        loss.backward()?;
        self.opt.step(&self.params)?;
        zero_grads(&self.params);
        self.step += 1;
        loss.item()
    }
}

/// Phase 1.5: consistency distillation of the preview adapter. Only the
/// adapter matrices receive optimizer updates; the base model, encoder and
/// class embeddings stay frozen.
pub struct DistillTrainer {
    adapter_params: Vec<Tensor>,
    all_params: Vec<Tensor>,
    opt: AdamW,
    cfg: TrainConfig,
    grid: Vec<usize>,
    pub step: usize,
}

impl DistillTrainer {
    pub fn new(nets: &RestorationNets, cfg: TrainConfig, inference_steps: usize, schedule: &NoiseSchedule, start_step: usize) -> Result<DistillTrainer> {
        if !nets.denoiser.adapter_attached() {
            return Err(Error::InvalidArgument {
                op: "distill",
                detail: "denoiser has no adapter attached".into(),
            });
        }
        let adapter_params: Vec<Tensor> =
            adapter_named_params(nets).into_iter().map(|(_, t)| t).collect();
        let all_params: Vec<Tensor> = nets.named_params().into_iter().map(|(_, t)| t).collect();
        let opt = AdamW::new(&adapter_params, cfg.adamw());
        let grid = inference_grid(schedule.steps(), inference_steps)?;
        Ok(DistillTrainer { adapter_params, all_params, opt, cfg, grid, step: start_step })
    }

    pub fn optimizer(&mut self) -> &mut AdamW {
        &mut self.opt
    }

    pub fn params(&self) -> &[Tensor] {
        &self.adapter_params
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn step(&mut self, nets: &RestorationNets, schedule: &NoiseSchedule, rows: &[ManifestRow]) -> Result<f32> {
        let rows = train_rows(rows)?;
        let root = Rng::new(self.cfg.seed).derive(DISTILL_STREAM).derive(self.step as u64);
        let mut losses = Vec::with_capacity(self.cfg.batch_size);
        for b in 0..self.cfg.batch_size {
            let mut rng = root.derive(b as u64);
            let row = &rows[rng.next_below(rows.len())];
            let pair = generate_pair(row)?;
            let batch = prepare_distill_batch(
                &nets.denoiser,
                &nets.encoder,
                &nets.class_emb,
                schedule,
                &self.grid,
                &pair,
                &mut rng,
            )?;
            losses.push(distill_loss(&nets.denoiser, &nets.encoder, &nets.class_emb, schedule, &batch)?);
        }
        let loss = mean_loss(losses)?;
        loss.backward()?;
        self.opt.step(&self.adapter_params)?;
        zero_grads(&self.all_params);
        self.step += 1;
        loss.item()
    }
}

/// Phase 2: aggregator training. Previews are generated on the fly at
/// random inference-grid steps; the denoiser, adapter, encoder and class
/// embeddings are frozen, and the injection gate is pinned to 1.
pub struct Stage2Trainer {
    agg_params: Vec<Tensor>,
    all_params: Vec<Tensor>,
    opt: AdamW,
    cfg: TrainConfig,
    grid: Vec<usize>,
    /// Re-noise previews to the current marginal (ablation variant).
    pub noisy_previews: bool,
    pub step: usize,
}

impl Stage2Trainer {
    pub fn new(
        nets: &RestorationNets,
        cfg: TrainConfig,
        inference_steps: usize,
        schedule: &NoiseSchedule,
        noisy_previews: bool,
        start_step: usize,
    ) -> Result<Stage2Trainer> {
        if nets.aggregator.is_none() {
            return Err(Error::InvalidArgument {
                op: "stage2",
                detail: "no aggregator constructed".into(),
            });
        }
        let agg_params: Vec<Tensor> =
            aggregator_named_params(nets).into_iter().map(|(_, t)| t).collect();
        let all_params: Vec<Tensor> = nets.named_params().into_iter().map(|(_, t)| t).collect();
        let opt = AdamW::new(&agg_params, cfg.adamw());
        let grid = inference_grid(schedule.steps(), inference_steps)?;
        Ok(Stage2Trainer { agg_params, all_params, opt, cfg, grid, noisy_previews, step: start_step })
    }

    pub fn optimizer(&mut self) -> &mut AdamW {
        &mut self.opt
    }

    pub fn params(&self) -> &[Tensor] {
        &self.agg_params
    }

    pub fn step(&mut self, nets: &RestorationNets, schedule: &NoiseSchedule, rows: &[ManifestRow]) -> Result<f32> {
        let rows = train_rows(rows)?;
        let agg = nets.aggregator.as_ref().ok_or(Error::InvalidArgument {
            op: "stage2",
            detail: "no aggregator constructed".into(),
        })?;
        let root = Rng::new(self.cfg.seed).derive(STAGE2_STREAM).derive(self.step as u64);
        let mut losses = Vec::with_capacity(self.cfg.batch_size);
        for b in 0..self.cfg.batch_size {
            let mut rng = root.derive(b as u64);
            let row = &rows[rng.next_below(rows.len())];
            let pair = generate_pair(row)?;
            // previews are only trained on evaluated grid steps (t > 0)
            let t = self.grid[rng.next_below(self.grid.len() - 1)];
            let sample = add_noise(&pair.hq, t, schedule, &mut rng)?;
            let drop_lq = rng.next_bool(self.cfg.lq_dropout);
            let ctx = if drop_lq {
                Tensor::zeros(&[nets.encoder.token_count(), nets.encoder.dim()])
            } else {
                nets.encoder.forward(&pair.lq, t)?.detach()
            };
            let psi = nets
                .denoiser
                .with_adapter(true, |d| preview(d, &nets.class_emb, schedule, &sample.z_t, t, &ctx))?
                .detach();
            let reference = if self.noisy_previews {
                crate::aggregator::noisy_preview_variant(&psi, t, schedule, &mut rng)?
            } else {
                psi
            };
            let residuals = agg.aggregate(&reference, &pair.lq, t)?;
            let class_id = if rng.next_bool(self.cfg.class_dropout) {
                nets.class_emb.null_id()
            } else {
                pair.class_id
            };
            let eps_hat = nets.denoiser.forward(
                &sample.z_t,
                t,
                &nets.class_emb.tokens(class_id)?.detach(),
                &ctx,
                Some(&residuals),
                1.0,
            )?;
            losses.push(diffusion_loss(&eps_hat, &sample.eps)?);
        }
        let loss = mean_loss(losses)?;
        loss.backward()?;
        self.opt.step(&self.agg_params)?;
        zero_grads(&self.all_params);
        self.step += 1;
        loss.item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::AggregatorNet;
    use crate::data::{build_manifest, DatasetConfig};
    use crate::nets::{ClassEmbedding, CompactEncoder, DenoiserNet, NetConfig};

    fn small_cfg() -> NetConfig {
        NetConfig {
            image_size: 24,
            base_channels: 6,
            context_dim: 12,
            context_tokens: 3,
            class_token_len: 2,
            ..NetConfig::default()
        }
    }

    fn fresh_nets(seed: u64, with_adapter: bool, with_aggregator: bool) -> RestorationNets {
        let mut rng = Rng::new(seed);
        let cfg = small_cfg();
        let mut denoiser = DenoiserNet::new(&cfg, &mut rng);
        if with_adapter {
            // later phases act on a trained base; stand in with random
            // weights so the zero-initialized heads do not block gradients
            let mut params = Vec::new();
            denoiser.collect_params("d", &mut params);
            for (_, p) in &params {
                let data: Vec<f32> = (0..p.numel()).map(|_| rng.next_normal() * 0.1).collect();
                p.set_data(&data).unwrap();
            }
            denoiser.attach_adapter(&mut rng);
        }
        let aggregator = with_aggregator.then(|| AggregatorNet::from_denoiser(&denoiser, &mut rng));
        RestorationNets {
            denoiser,
            encoder: CompactEncoder::new(&cfg, &mut rng),
            class_emb: ClassEmbedding::new(&cfg, &mut rng),
            aggregator,
        }
    }

    fn tiny_train_cfg(batch: usize) -> TrainConfig {
        TrainConfig { batch_size: batch, lr: 3e-4, seed: 7, ..TrainConfig::default() }
    }

    #[test]
    fn stage1_steps_produce_finite_decreasing_loss() {
        let nets = fresh_nets(1, false, false);
        let schedule = NoiseSchedule::cosine(64).unwrap();
        let rows = build_manifest(&DatasetConfig { train: 16, val: 0, test: 0, seed: 3 });
        let mut cfg = tiny_train_cfg(4);
        cfg.lr = 1e-3;
        let mut trainer = Stage1Trainer::new(&nets, cfg, 0);
        let mut losses = Vec::new();
        for _ in 0..40 {
            let loss = trainer.step(&nets, &schedule, &rows).unwrap();
            assert!(loss.is_finite());
            losses.push(loss as f64);
        }
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not move: head {head}, tail {tail}");
    }

    #[test]
    fn stage1_resume_matches_uninterrupted_run() {
        let schedule = NoiseSchedule::cosine(64).unwrap();
        let rows = build_manifest(&DatasetConfig { train: 8, val: 0, test: 0, seed: 4 });

        let nets_a = fresh_nets(2, false, false);
        let mut tr_a = Stage1Trainer::new(&nets_a, tiny_train_cfg(2), 0);
        let mut continuous = Vec::new();
        for _ in 0..6 {
            continuous.push(tr_a.step(&nets_a, &schedule, &rows).unwrap());
        }

        // same init, new trainer constructed mid-run with restored state
        let nets_b = fresh_nets(2, false, false);
        let mut tr_b = Stage1Trainer::new(&nets_b, tiny_train_cfg(2), 0);
        let mut resumed = Vec::new();
        for _ in 0..3 {
            resumed.push(tr_b.step(&nets_b, &schedule, &rows).unwrap());
        }
        let (m, v, t) = {
            let (m, v, t) = tr_b.optimizer().state();
            (m.to_vec(), v.to_vec(), t)
        };
        let mut tr_c = Stage1Trainer::new(&nets_b, tiny_train_cfg(2), tr_b.step);
        tr_c.optimizer().restore_state(m, v, t).unwrap();
        for _ in 0..3 {
            resumed.push(tr_c.step(&nets_b, &schedule, &rows).unwrap());
        }
        for (a, b) in continuous.iter().zip(&resumed) {
            assert_eq!(a.to_bits(), b.to_bits(), "continuous {continuous:?} vs resumed {resumed:?}");
        }
    }

    #[test]
    fn full_lq_dropout_freezes_encoder() {
        let nets = fresh_nets(3, false, false);
        let schedule = NoiseSchedule::cosine(64).unwrap();
        let rows = build_manifest(&DatasetConfig { train: 8, val: 0, test: 0, seed: 5 });
        let mut cfg = tiny_train_cfg(2);
        cfg.lq_dropout = 1.0;
        let mut named = Vec::new();
        nets.encoder.collect_params("encoder", &mut named);
        let before = param_fingerprint(&named);
        let mut trainer = Stage1Trainer::new(&nets, cfg, 0);
        for _ in 0..3 {
            trainer.step(&nets, &schedule, &rows).unwrap();
        }
        // the encoder never entered the graph: zero moments, zero update
        assert_eq!(param_fingerprint(&named), before);
    }

    #[test]
    fn distillation_freezes_base_weights() {
        let nets = fresh_nets(4, true, false);
        let schedule = NoiseSchedule::cosine(64).unwrap();
        let rows = build_manifest(&DatasetConfig { train: 8, val: 0, test: 0, seed: 6 });
        let mut base_named = Vec::new();
        nets.denoiser.collect_params("denoiser", &mut base_named);
        nets.encoder.collect_params("encoder", &mut base_named);
        nets.class_emb.collect_params("class_emb", &mut base_named);
        let before = param_fingerprint(&base_named);

        let mut adapter_named = Vec::new();
        nets.denoiser.collect_adapter_params("denoiser", &mut adapter_named);
        let adapter_before = param_fingerprint(&adapter_named);

        let mut trainer = DistillTrainer::new(&nets, tiny_train_cfg(2), 8, &schedule, 0).unwrap();
        for _ in 0..3 {
            let loss = trainer.step(&nets, &schedule, &rows).unwrap();
            assert!(loss.is_finite());
        }
        assert_eq!(param_fingerprint(&base_named), before, "base weights moved");
        assert_ne!(param_fingerprint(&adapter_named), adapter_before, "adapter never moved");
    }

    #[test]
    fn distill_requires_adapter() {
        let nets = fresh_nets(5, false, false);
        let schedule = NoiseSchedule::cosine(64).unwrap();
        assert!(DistillTrainer::new(&nets, tiny_train_cfg(2), 8, &schedule, 0).is_err());
    }

    #[test]
    fn stage2_trains_only_the_aggregator() {
        let nets = fresh_nets(6, true, true);
        let schedule = NoiseSchedule::cosine(64).unwrap();
        let rows = build_manifest(&DatasetConfig { train: 8, val: 0, test: 0, seed: 7 });
        let mut frozen_named = Vec::new();
        nets.denoiser.collect_params("denoiser", &mut frozen_named);
        nets.denoiser.collect_adapter_params("denoiser", &mut frozen_named);
        nets.encoder.collect_params("encoder", &mut frozen_named);
        nets.class_emb.collect_params("class_emb", &mut frozen_named);
        let before = param_fingerprint(&frozen_named);

        let mut agg_named = Vec::new();
        nets.aggregator.as_ref().unwrap().collect_params("aggregator", &mut agg_named);
        let agg_before = param_fingerprint(&agg_named);

        let mut trainer = Stage2Trainer::new(&nets, tiny_train_cfg(2), 8, &schedule, false, 0).unwrap();
        for _ in 0..3 {
            let loss = trainer.step(&nets, &schedule, &rows).unwrap();
            assert!(loss.is_finite());
        }
        assert_eq!(param_fingerprint(&frozen_named), before, "frozen modules moved");
        assert_ne!(param_fingerprint(&agg_named), agg_before, "aggregator never moved");
    }

    #[test]
    fn stage2_noisy_variant_runs() {
        let nets = fresh_nets(7, true, true);
        let schedule = NoiseSchedule::cosine(64).unwrap();
        let rows = build_manifest(&DatasetConfig { train: 4, val: 0, test: 0, seed: 8 });
        let mut trainer = Stage2Trainer::new(&nets, tiny_train_cfg(2), 8, &schedule, true, 0).unwrap();
        let loss = trainer.step(&nets, &schedule, &rows).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn fingerprint_sensitive_to_single_bit() {
        let t = Tensor::param(&[2], alloc::vec![1.0, 2.0]).unwrap();
        let named = alloc::vec![(String::from("p"), t.clone())];
        let a = param_fingerprint(&named);
        t.set_data(&[1.0, 2.0000002]).unwrap();
        assert_ne!(a, param_fingerprint(&named));
    }
}
