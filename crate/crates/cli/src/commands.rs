//! Command implementations. The binary is a thin parser over these
//! functions, so tests can drive the exact same code paths in-process.

use std::path::{Path, PathBuf};
use std::time::Instant;

use previr_core::data::{
    build_manifest, eval_set, generate_pair, DegradeLevel, ImagePair, ManifestRow, Split,
};
use previr_core::diffusion::NoiseSchedule;
use previr_core::metrics::{
    band_ssim, downsample_box, mean_sq_diff, psnr, ssim, strict_ordering_fraction, trajectory_report,
    MetricReport,
};
use previr_core::previewer::self_consistency;
use previr_core::sampler::{sample_restore, SamplerConfig, SamplerMode, TrajectoryLog};
use previr_core::train::{
    adapter_named_params, aggregator_named_params, param_fingerprint, stage1_named_params,
    DistillTrainer, Stage1Trainer, Stage2Trainer,
};
use previr_core::{Rng, Tensor};

use crate::checkpoint::{Checkpoint, Phase};
use crate::config::RunConfig;
use crate::error::{runtime, usage, Result};
use crate::formats;
use crate::pipeline::{parallel_rows, Pipeline};

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    out_path(cfg, "manifest.csv")
}

fn split_rows(rows: &[ManifestRow], split: Split) -> Vec<ManifestRow> {
    rows.iter().filter(|r| r.split == split).cloned().collect()
}

fn load_manifest(cfg: &RunConfig) -> Result<Vec<ManifestRow>> {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(usage(format!(
            "dataset manifest '{}' not found; run gen-data first",
            path.display()
        )));
    }
    formats::read_manifest_csv(&path)
}

/// Writes the dataset manifest.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let rows = build_manifest(&cfg.dataset_config());
    formats::write_manifest_csv(&rows, manifest_path(cfg))?;
    formats::append_run_log(&cfg.out_dir, "gen-data", &cfg.hash_hex(), cfg.data_seed)?;
    println!(
        "gen-data: {} rows ({} train / {} val / {} test) -> {}",
        rows.len(),
        cfg.train_size,
        cfg.val_size,
        cfg.test_size,
        manifest_path(cfg).display()
    );
    Ok(())
}

/// Phase 1 training: denoiser + compact encoder + class embeddings.
pub fn cmd_train_stage1(cfg: &RunConfig, resume: Option<&str>, steps_cap: Option<usize>) -> Result<()> {
    let rows = split_rows(&load_manifest(cfg)?, Split::Train);
    let hash = cfg.hash_hex();
    let (pipeline, start_step, resumed_opt) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.phase != Phase::BaseDcp {
                return Err(usage(format!(
                    "resume expects a '{}' checkpoint, got '{}'",
                    Phase::BaseDcp.name(),
                    ck.phase.name()
                )));
            }
            if ck.config_hash != hash {
                return Err(usage("resume checkpoint was written under a different config"));
            }
            let opt = ck.opt.clone();
            (Pipeline::from_checkpoint(cfg, &ck)?, ck.step, opt)
        }
        None => (Pipeline::build(cfg, Phase::BaseDcp)?, 0, None),
    };
    let mut trainer = Stage1Trainer::new(&pipeline.nets, cfg.train_config(), start_step);
    let named = stage1_named_params(&pipeline.nets);
    if let Some(state) = &resumed_opt {
        Pipeline::restore_opt(&named, state, trainer.optimizer())?;
    }
    let total = steps_cap.map(|c| c.min(cfg.stage1_steps)).unwrap_or(cfg.stage1_steps);
    let mut losses = Vec::new();
    while trainer.step < total {
        let loss = trainer.step(&pipeline.nets, &pipeline.schedule, &rows)?;
        if (trainer.step - 1) % cfg.log_every.max(1) == 0 || trainer.step == total {
            losses.push((trainer.step - 1, loss));
        }
    }
    formats::write_loss_csv(&losses, out_path(cfg, "stage1_loss.csv"))?;
    let mut ck = pipeline.to_checkpoint(Phase::BaseDcp, &hash, trainer.step);
    ck.opt = Some(Pipeline::opt_state(&named, trainer.optimizer()));
    ck.save(out_path(cfg, "stage1.ckpt"))?;
    formats::append_run_log(&cfg.out_dir, "train-stage1", &hash, cfg.train_seed)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "train-stage1: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
            trainer.step,
            first.1,
            last.1,
            out_path(cfg, "stage1.ckpt").display()
        );
    }
    Ok(())
}

/// Consistency distillation of the preview adapter on a frozen base.
pub fn cmd_distill_previewer(cfg: &RunConfig, stage1: Option<&str>) -> Result<()> {
    let rows = load_manifest(cfg)?;
    let train = split_rows(&rows, Split::Train);
    let val = split_rows(&rows, Split::Val);
    let hash = cfg.hash_hex();
    let path = stage1.map(PathBuf::from).unwrap_or_else(|| out_path(cfg, "stage1.ckpt"));
    let ck = Checkpoint::load(&path)?;
    if ck.phase != Phase::BaseDcp {
        return Err(usage(format!(
            "distill-previewer needs a '{}' checkpoint, got '{}': phases must run in order",
            Phase::BaseDcp.name(),
            ck.phase.name()
        )));
    }
    let mut pipeline = Pipeline::from_checkpoint(cfg, &ck)?;
    let mut rng = Rng::new(cfg.train_seed).derive(0x41444150);
    pipeline.nets.denoiser.attach_adapter(&mut rng);

    let base_named = stage1_named_params(&pipeline.nets);
    let base_before = param_fingerprint(&base_named);

    let eval_pairs: Vec<ImagePair> = val
        .iter()
        .take(64)
        .map(generate_pair)
        .collect::<previr_core::Result<_>>()?;
    if eval_pairs.is_empty() {
        return Err(usage("no validation rows for the consistency metric; increase data.val_size"));
    }
    let sc_of = |nets: &previr_core::sampler::RestorationNets| -> Result<f32> {
        Ok(self_consistency(
            &nets.denoiser,
            &nets.encoder,
            &nets.class_emb,
            &pipeline.schedule,
            trainer_grid(cfg)?.as_slice(),
            &eval_pairs,
            cfg.eval_seed,
        )?)
    };

    let mut trainer =
        DistillTrainer::new(&pipeline.nets, cfg.train_config(), cfg.sample_steps, &pipeline.schedule, 0)?;
    let sc_before = sc_of(&pipeline.nets)?;
    let mut progress = Vec::new();
    let mut last_sc = sc_before;
    while trainer.step < cfg.distill_steps {
        let loss = trainer.step(&pipeline.nets, &pipeline.schedule, &train)?;
        let step = trainer.step - 1;
        if cfg.eval_every > 0 && trainer.step % cfg.eval_every == 0 {
            last_sc = sc_of(&pipeline.nets)?;
        }
        if step % cfg.log_every.max(1) == 0 || trainer.step == cfg.distill_steps {
            progress.push((step, loss, last_sc));
        }
    }
    let sc_after = sc_of(&pipeline.nets)?;
    if param_fingerprint(&base_named) != base_before {
        return Err(runtime("distillation modified frozen base weights"));
    }
    formats::write_distill_csv(&progress, out_path(cfg, "distill_loss.csv"))?;
    let adapter_named = adapter_named_params(&pipeline.nets);
    let mut out_ck = pipeline.to_checkpoint(Phase::Previewer, &hash, trainer.step);
    out_ck.opt = Some(Pipeline::opt_state(&adapter_named, trainer.optimizer()));
    out_ck.save(out_path(cfg, "previewer.ckpt"))?;
    formats::append_run_log(&cfg.out_dir, "distill-previewer", &hash, cfg.train_seed)?;
    println!(
        "distill-previewer: {} steps, self-consistency {:.5} -> {:.5} ({:.1}% reduction), checkpoint {}",
        trainer.step,
        sc_before,
        sc_after,
        (1.0 - sc_after / sc_before) * 100.0,
        out_path(cfg, "previewer.ckpt").display()
    );
    Ok(())
}

fn trainer_grid(cfg: &RunConfig) -> Result<Vec<usize>> {
    Ok(previr_core::diffusion::inference_grid(cfg.train_steps, cfg.sample_steps)?)
}

/// Phase 2 training: the aggregator, on a frozen base + previewer.
pub fn cmd_train_stage2(cfg: &RunConfig, previewer: Option<&str>, noisy_previews: bool) -> Result<()> {
    let rows = load_manifest(cfg)?;
    let train = split_rows(&rows, Split::Train);
    let hash = cfg.hash_hex();
    let path = previewer.map(PathBuf::from).unwrap_or_else(|| out_path(cfg, "previewer.ckpt"));
    let ck = Checkpoint::load(&path)?;
    if ck.phase != Phase::Previewer {
        return Err(usage(format!(
            "train-stage2 needs a '{}' checkpoint, got '{}': phases must run in order",
            Phase::Previewer.name(),
            ck.phase.name()
        )));
    }
    let mut pipeline = Pipeline::from_checkpoint(cfg, &ck)?;
    let mut rng = Rng::new(cfg.train_seed).derive(0x41474752);
    pipeline.nets.aggregator =
        Some(previr_core::aggregator::AggregatorNet::from_denoiser(&pipeline.nets.denoiser, &mut rng));

    let mut frozen_named = stage1_named_params(&pipeline.nets);
    frozen_named.extend(adapter_named_params(&pipeline.nets));
    let frozen_before = param_fingerprint(&frozen_named);

    let mut trainer = Stage2Trainer::new(
        &pipeline.nets,
        cfg.train_config(),
        cfg.sample_steps,
        &pipeline.schedule,
        noisy_previews,
        0,
    )?;
    let mut losses = Vec::new();
    while trainer.step < cfg.stage2_steps {
        let loss = trainer.step(&pipeline.nets, &pipeline.schedule, &train)?;
        let step = trainer.step - 1;
        if step % cfg.log_every.max(1) == 0 || trainer.step == cfg.stage2_steps {
            losses.push((step, loss));
        }
    }
    if param_fingerprint(&frozen_named) != frozen_before {
        return Err(runtime("stage-2 training modified frozen modules"));
    }
    let (ck_name, csv_name) = if noisy_previews {
        ("aggregator_noisy.ckpt", "stage2_noisy_loss.csv")
    } else {
        ("aggregator.ckpt", "stage2_loss.csv")
    };
    formats::write_loss_csv(&losses, out_path(cfg, csv_name))?;
    let agg_named = aggregator_named_params(&pipeline.nets);
    let mut out_ck = pipeline.to_checkpoint(Phase::Aggregator, &hash, trainer.step);
    out_ck.noisy_previews = noisy_previews;
    out_ck.opt = Some(Pipeline::opt_state(&agg_named, trainer.optimizer()));
    out_ck.save(out_path(cfg, ck_name))?;
    formats::append_run_log(&cfg.out_dir, "train-stage2", &hash, cfg.train_seed)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "train-stage2{}: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
            if noisy_previews { " (noisy previews)" } else { "" },
            trainer.step,
            first.1,
            last.1,
            out_path(cfg, ck_name).display()
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RestoreOptions {
    pub ckpt: Option<String>,
    /// Degradation level tag for a generated evaluation set.
    pub level: Option<String>,
    /// Directory of PGM inputs (alternative to `level`).
    pub input_dir: Option<String>,
    /// Class condition for PGM inputs; defaults to the null class.
    pub class_id: Option<usize>,
    pub out: Option<String>,
    pub threads: usize,
    /// `(target_class, cutoff)` switches to creative restoration.
    pub creative: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct RestoreSummary {
    pub count: usize,
    pub mean_psnr_restored: f32,
    pub mean_ssim_restored: f32,
    pub mean_band_ssim_restored: f32,
    pub mean_psnr_lq: f32,
    pub out_dir: PathBuf,
}

enum RestoreInput {
    /// Level mode: the pair regenerates inside the worker.
    Row(ManifestRow),
    /// Raw image data read from disk.
    Image { data: Vec<f32>, class_id: usize },
}

/// Runs the configured sampler over a test set or a directory of images,
/// writing restored PGMs, per-image trajectory CSVs and a metric report.
pub fn cmd_restore(cfg: &RunConfig, opts: &RestoreOptions) -> Result<RestoreSummary> {
    let base_sampler = cfg.sampler_config().map_err(|e| usage(e.to_string()))?;
    let mode = base_sampler.mode;
    let required_phase = if mode == SamplerMode::NoReference { Phase::BaseDcp } else { Phase::Aggregator };
    let ckpt_path = opts
        .ckpt
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| out_path(cfg, "aggregator.ckpt"));
    let ck = Checkpoint::load(&ckpt_path)?;
    ck.require_phase(required_phase)?;

    let level_name = opts.level.clone().unwrap_or_else(|| "mild".to_string());
    let inputs: Vec<RestoreInput> = match &opts.input_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| usage(format!("cannot read input dir '{dir}': {e}")))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().map(|x| x == "pgm").unwrap_or(false))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(usage(format!("no .pgm files in '{dir}'")));
            }
            let class_id = opts.class_id.unwrap_or(previr_core::data::NUM_CLASSES);
            paths
                .iter()
                .map(|p| {
                    let img = formats::read_pgm(p)?;
                    if img.shape() != [1, cfg.image_size, cfg.image_size] {
                        return Err(runtime(format!(
                            "'{}' has shape {:?}, expected [1, {2}, {2}]",
                            p.display(),
                            img.shape(),
                            cfg.image_size
                        )));
                    }
                    Ok(RestoreInput::Image { data: img.to_vec(), class_id })
                })
                .collect::<Result<_>>()?
        }
        None => {
            let level = DegradeLevel::parse(&level_name).map_err(|e| usage(e.to_string()))?;
            eval_set(level, cfg.eval_count, cfg.eval_seed)
                .into_iter()
                .map(RestoreInput::Row)
                .collect()
        }
    };

    let out_dir = opts
        .out
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| out_path(cfg, &format!("restore_{}_{}", mode.name(), level_name)));
    std::fs::create_dir_all(&out_dir)?;

    struct ImageResult {
        restored: Vec<f32>,
        lq: Vec<f32>,
        hq: Option<Vec<f32>>,
        log: TrajectoryLog,
        scores: Option<(f32, f32, f32, f32)>, // psnr, ssim, band-ssim, lq psnr
    }

    let image_shape = [1usize, cfg.image_size, cfg.image_size];
    let threads = if opts.threads == 0 { crate::pipeline::default_threads() } else { opts.threads };
    let results: Vec<ImageResult> = parallel_rows(cfg, &ck, &inputs, threads, |pipeline, index, input| {
        let mut rng = Rng::new(base_sampler.seed).derive(index as u64);
        let (lq, class_id, hq) = match input {
            RestoreInput::Row(row) => {
                let pair = generate_pair(row)?;
                (pair.lq, pair.class_id, Some(pair.hq))
            }
            RestoreInput::Image { data, class_id } => {
                (Tensor::from_vec(&image_shape, data.clone())?, *class_id, None)
            }
        };
        let mut sampler = base_sampler.clone();
        if let Some((target, cutoff)) = opts.creative {
            sampler.creative = Some(previr_core::sampler::CreativeSpec { target_class: target, cutoff });
        }
        let (restored, log) =
            sample_restore(&pipeline.nets, &pipeline.schedule, &sampler, &lq, class_id, &mut rng)?;
        let scores = match &hq {
            Some(hq) => Some((
                psnr(&restored, hq, 2.0)?,
                ssim(&restored, hq)?,
                band_ssim(&restored, hq)?,
                psnr(&lq, hq, 2.0)?,
            )),
            None => None,
        };
        Ok(ImageResult {
            restored: restored.to_vec(),
            lq: lq.to_vec(),
            hq: hq.map(|h| h.to_vec()),
            log,
            scores,
        })
    })?;

    for (i, res) in results.iter().enumerate() {
        let as_img = |data: &[f32]| Tensor::from_vec(&image_shape, data.to_vec());
        formats::write_pgm(&as_img(&res.restored)?, out_dir.join(format!("restored_{i:04}.pgm")))?;
        formats::write_pgm(&as_img(&res.lq)?, out_dir.join(format!("lq_{i:04}.pgm")))?;
        if let Some(hq) = &res.hq {
            formats::write_pgm(&as_img(hq)?, out_dir.join(format!("hq_{i:04}.pgm")))?;
        }
        formats::write_trajectory_csv(&res.log, out_dir.join(format!("trajectory_{i:04}.csv")))?;
    }

    let scored: Vec<(f32, f32, f32, f32)> = results.iter().filter_map(|r| r.scores).collect();
    let summary = if !scored.is_empty() {
        let report = MetricReport::from_scores(
            scored.iter().map(|s| s.0).collect(),
            scored.iter().map(|s| s.1).collect(),
        );
        let indices: Vec<usize> = (0..scored.len()).collect();
        formats::write_metrics_csv(&report, &indices, out_dir.join("metrics.csv"))?;
        let band = scored.iter().map(|s| s.2 as f64).sum::<f64>() / scored.len() as f64;
        let lq_psnr = scored.iter().map(|s| s.3 as f64).sum::<f64>() / scored.len() as f64;
        RestoreSummary {
            count: results.len(),
            mean_psnr_restored: report.mean_psnr,
            mean_ssim_restored: report.mean_ssim,
            mean_band_ssim_restored: band as f32,
            mean_psnr_lq: lq_psnr as f32,
            out_dir: out_dir.clone(),
        }
    } else {
        RestoreSummary {
            count: results.len(),
            mean_psnr_restored: 0.0,
            mean_ssim_restored: 0.0,
            mean_band_ssim_restored: 0.0,
            mean_psnr_lq: 0.0,
            out_dir: out_dir.clone(),
        }
    };
    formats::append_run_log(&cfg.out_dir, "restore", &cfg.hash_hex(), base_sampler.seed)?;
    println!(
        "restore: {} images, mode {}, PSNR {:.2} dB (LQ baseline {:.2} dB), SSIM {:.4} -> {}",
        summary.count,
        mode.name(),
        summary.mean_psnr_restored,
        summary.mean_psnr_lq,
        summary.mean_ssim_restored,
        out_dir.display()
    );
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    pub ckpt: Option<String>,
    pub eta_sweep: Vec<usize>,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub ordering_fraction: f32,
    pub ordering_pass: bool,
    pub out_dir: PathBuf,
}

fn run_level_logs(
    cfg: &RunConfig,
    ck: &Checkpoint,
    sampler: &SamplerConfig,
    level: DegradeLevel,
    threads: usize,
) -> Result<Vec<TrajectoryLog>> {
    let rows = eval_set(level, cfg.eval_count, cfg.eval_seed);
    let logs = parallel_rows(cfg, ck, &rows, threads, |pipeline, index, row| {
        let pair = generate_pair(row)?;
        let mut rng = Rng::new(sampler.seed).derive(index as u64);
        let (_, log) =
            sample_restore(&pipeline.nets, &pipeline.schedule, sampler, &pair.lq, pair.class_id, &mut rng)?;
        Ok(log)
    })?;
    Ok(logs)
}

/// Dumps the first log's per-step preview and denoising-mean snapshots as
/// PGMs (active only when `sampler.snapshots` is set).
fn dump_snapshots(cfg: &RunConfig, level: &str, log: &TrajectoryLog, out_dir: &Path) -> Result<()> {
    let shape = [1usize, cfg.image_size, cfg.image_size];
    for (step, (psi, mean)) in log.snapshots.iter().enumerate() {
        let psi_img = Tensor::from_vec(&shape, psi.clone())?;
        let mean_img = Tensor::from_vec(&shape, mean.clone())?;
        formats::write_pgm(&psi_img, out_dir.join(format!("snap_{level}_step{step:02}_preview.pgm")))?;
        formats::write_pgm(&mean_img, out_dir.join(format!("snap_{level}_step{step:02}_mean.pgm")))?;
    }
    Ok(())
}

/// Trajectory diagnostics across the four degradation levels: per-step
/// means of preview distance, temporal difference and the quality
/// indicator, plus the indicator-ordering verdict.
pub fn cmd_analyze(cfg: &RunConfig, opts: &AnalyzeOptions) -> Result<AnalyzeSummary> {
    let ckpt_path = opts
        .ckpt
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| out_path(cfg, "aggregator.ckpt"));
    let ck = Checkpoint::load(&ckpt_path)?;
    ck.require_phase(Phase::Aggregator)?;

    let mut sampler = cfg.sampler_config().map_err(|e| usage(e.to_string()))?;
    sampler.mode = SamplerMode::Adaptive;
    let threads = if opts.threads == 0 { crate::pipeline::default_threads() } else { opts.threads };
    let out_dir = out_path(cfg, "analysis");
    std::fs::create_dir_all(&out_dir)?;

    let schedule = NoiseSchedule::cosine(cfg.train_steps)?;
    formats::write_schedule_csv(&schedule, out_dir.join("schedule.csv"))?;

    let mut level_logs = Vec::new();
    for level in DegradeLevel::ANALYSIS {
        let logs = run_level_logs(cfg, &ck, &sampler, level, threads)?;
        if sampler.snapshots {
            if let Some(first) = logs.first() {
                dump_snapshots(cfg, level.name(), first, &out_dir)?;
            }
        }
        level_logs.push((level.name(), logs));
    }
    let groups: Vec<(&str, Vec<&TrajectoryLog>)> =
        level_logs.iter().map(|(name, logs)| (*name, logs.iter().collect())).collect();
    let stats = trajectory_report(&groups)?;
    formats::write_panel_csv(&stats, &stats.preview_mean, out_dir.join("panel_a.csv"))?;
    formats::write_panel_csv(&stats, &stats.temporal, out_dir.join("panel_b.csv"))?;
    formats::write_panel_csv(&stats, &stats.delta, out_dir.join("panel_c.csv"))?;

    // indicator ordering over post-warmup steps with an active gate
    let warmup = 2usize;
    let active_end = sampler.steps - sampler.eta_cutoff;
    let fraction = strict_ordering_fraction(&stats, warmup, active_end)?;
    let pass = fraction >= 0.8;
    println!(
        "analyze: indicator ordering hq > down4 > down8_analog > multi holds at {:.0}% of steps [{}, {}): {}",
        fraction * 100.0,
        warmup,
        active_end,
        if pass { "PASS" } else { "FAIL" }
    );

    for &eta in &opts.eta_sweep {
        let mut swept = sampler.clone();
        swept.eta_cutoff = eta;
        swept.validate().map_err(|e| usage(e.to_string()))?;
        let mut sweep_logs = Vec::new();
        for level in DegradeLevel::ANALYSIS {
            sweep_logs.push((level.name(), run_level_logs(cfg, &ck, &swept, level, threads)?));
        }
        let sweep_groups: Vec<(&str, Vec<&TrajectoryLog>)> =
            sweep_logs.iter().map(|(name, logs)| (*name, logs.iter().collect())).collect();
        let sweep_stats = trajectory_report(&sweep_groups)?;
        formats::write_panel_csv(
            &sweep_stats,
            &sweep_stats.delta,
            out_dir.join(format!("panel_c_eta{eta}.csv")),
        )?;
    }

    formats::append_run_log(&cfg.out_dir, "analyze", &cfg.hash_hex(), sampler.seed)?;
    Ok(AnalyzeSummary { ordering_fraction: fraction, ordering_pass: pass, out_dir })
}

/// Times the heavy code paths at the configured scale.
pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let pipeline = Pipeline::build(cfg, Phase::Aggregator)?;
    let mut rng = Rng::new(1);
    let z = Tensor::randn(&[1, cfg.image_size, cfg.image_size], &mut rng);
    let lq = Tensor::randn(&[1, cfg.image_size, cfg.image_size], &mut rng)
        .clamp(-1.0, 1.0)
        .map_err(|e| runtime(e.to_string()))?;
    let ctx = pipeline.nets.encoder.forward(&lq, 16).map_err(|e| runtime(e.to_string()))?.detach();
    let tokens = pipeline.nets.class_emb.tokens(0).map_err(|e| runtime(e.to_string()))?;

    let reps = 20;
    let start = Instant::now();
    for _ in 0..reps {
        pipeline
            .nets
            .denoiser
            .forward(&z, 16, &tokens, &ctx, None, 0.0)
            .map_err(|e| runtime(e.to_string()))?;
    }
    let fwd = start.elapsed().as_secs_f64() / reps as f64;
    println!("bench: denoiser forward        {:8.2} ms", fwd * 1e3);

    let start = Instant::now();
    for _ in 0..reps {
        let eps = pipeline
            .nets
            .denoiser
            .forward(&z, 16, &tokens, &ctx, None, 0.0)
            .map_err(|e| runtime(e.to_string()))?;
        let loss = eps.square().and_then(|s| s.mean()).map_err(|e| runtime(e.to_string()))?;
        loss.backward().map_err(|e| runtime(e.to_string()))?;
    }
    let bwd = start.elapsed().as_secs_f64() / reps as f64;
    previr_core::tensor::zero_grads(
        &pipeline.nets.named_params().into_iter().map(|(_, t)| t).collect::<Vec<_>>(),
    );
    println!("bench: forward + backward      {:8.2} ms", bwd * 1e3);

    let sampler = SamplerConfig { mode: SamplerMode::FixedGate, ..cfg.sampler_config()? };
    let start = Instant::now();
    let mut sample_rng = Rng::new(2);
    sample_restore(&pipeline.nets, &pipeline.schedule, &sampler, &lq, 0, &mut sample_rng)
        .map_err(|e| runtime(e.to_string()))?;
    let samp = start.elapsed().as_secs_f64();
    println!("bench: one {}-step restoration {:8.2} ms", sampler.steps, samp * 1e3);
    Ok(())
}

/// Extra knobs used by the acceptance harness.
pub fn mean_downsampled_l2(a: &Tensor, b: &Tensor) -> Result<f32> {
    Ok(mean_sq_diff(&downsample_box(a, 4)?, &downsample_box(b, 4)?)?)
}
