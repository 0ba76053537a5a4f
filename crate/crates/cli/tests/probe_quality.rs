// scratch diagnostic (removed before final)
use previr::checkpoint::Checkpoint;
use previr::pipeline::Pipeline;
use previr::RunConfig;
use previr_core::data::{eval_set, generate_pair, DegradeLevel};
use previr_core::diffusion::{add_noise, inference_grid, x0_from_eps};
use previr_core::metrics::psnr;
use previr_core::previewer::preview;
use previr_core::sampler::cfg_eps;
use previr_core::{Rng, Tensor};

#[test]
fn single_step_quality() {
    let dir = match std::env::var("PROBE_DIR") { Ok(d) => d, Err(_) => return };
    let mut cfg = RunConfig::default();
    for s in ["nets.channels=12", "nets.context_dim=24", "nets.context_tokens=6"] {
        cfg.apply_set(s).unwrap();
    }
    let ck = Checkpoint::load(format!("{dir}/aggregator.ckpt")).unwrap();
    let pipeline = Pipeline::from_checkpoint(&cfg, &ck).unwrap();
    pipeline.nets.freeze();
    let nets = &pipeline.nets;
    let schedule = &pipeline.schedule;
    let grid = inference_grid(256, 30).unwrap();

    let rows = eval_set(DegradeLevel::Mild, 8, 42);
    for &t in &[grid[5], grid[15], grid[25], grid[28]] {
        let mut p_cond = 0.0;
        let mut p_prev = 0.0;
        let mut p_lq = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let pair = generate_pair(row).unwrap();
            let mut rng = Rng::new(777).derive(i as u64);
            let sample = add_noise(&pair.hq, t, schedule, &mut rng).unwrap();
            let raw = nets.encoder.encode(&pair.lq).unwrap();
            let ctx = nets.encoder.modulate(&raw, t).unwrap();
            // previewer one-step estimate
            let psi = nets
                .denoiser
                .with_adapter(true, |d| preview(d, &nets.class_emb, schedule, &sample.z_t, t, &ctx))
                .unwrap();
            // full conditional with residuals at delta=1 and delta=5
            let res = nets.aggregator.as_ref().unwrap().aggregate(&psi, &pair.lq, t).unwrap();
            let cond = nets.class_emb.tokens(pair.class_id).unwrap();
            let null = nets.class_emb.tokens(nets.class_emb.null_id()).unwrap();
            let zero_ctx = Tensor::zeros(&[6, 24]);
            for (delta, acc) in [(5.0f32, &mut p_cond)] {
                let ec = nets.denoiser.forward(&sample.z_t, t, &cond, &ctx, Some(&res), delta).unwrap();
                let eu = nets.denoiser.forward(&sample.z_t, t, &null, &zero_ctx, Some(&res), delta).unwrap();
                let eps = cfg_eps(&ec, &eu, 2.0).unwrap();
                let xh = x0_from_eps(&sample.z_t, &eps, t, schedule).unwrap().clamp(-1.0, 1.0).unwrap();
                *acc += psnr(&xh, &pair.hq, 2.0).unwrap() / rows.len() as f32;
            }
            p_prev += psnr(&psi, &pair.hq, 2.0).unwrap() / rows.len() as f32;
            p_lq += psnr(&pair.lq, &pair.hq, 2.0).unwrap() / rows.len() as f32;
        }
        eprintln!("t={t:3}: x_hat(delta5,cfg2) {p_cond:.1} dB | preview {p_prev:.1} dB | lq {p_lq:.1} dB");
    }
}

#[test]
fn trajectory_quality() {
    let dir = match std::env::var("PROBE_DIR") { Ok(d) => d, Err(_) => return };
    let mut cfg = RunConfig::default();
    for s in ["nets.channels=12", "nets.context_dim=24", "nets.context_tokens=6"] {
        cfg.apply_set(s).unwrap();
    }
    let ck = Checkpoint::load(format!("{dir}/aggregator.ckpt")).unwrap();
    let pipeline = Pipeline::from_checkpoint(&cfg, &ck).unwrap();
    pipeline.nets.freeze();
    let rows = eval_set(DegradeLevel::Mild, 4, 42);
    let mut sampler = cfg.sampler_config().unwrap();
    sampler.cfg_scale = 2.0;
    sampler.snapshots = true;
    for (i, row) in rows.iter().enumerate().take(2) {
        let pair = generate_pair(row).unwrap();
        let mut rng = Rng::new(0).derive(i as u64);
        let (out, log) = previr_core::sampler::sample_restore(
            &pipeline.nets, &pipeline.schedule, &sampler, &pair.lq, pair.class_id, &mut rng,
        ).unwrap();
        eprintln!("image {i}: lq {:.1} dB out {:.1} dB", psnr(&pair.lq, &pair.hq, 2.0).unwrap(), psnr(&out, &pair.hq, 2.0).unwrap());
        for s in [0usize, 5, 10, 15, 20, 24, 26, 28, 29] {
            let (psi, zhat) = &log.snapshots[s];
            let psi_t = Tensor::from_vec(&[1, 24, 24], psi.clone()).unwrap();
            let z_t = Tensor::from_vec(&[1, 24, 24], zhat.clone()).unwrap();
            eprintln!(
                "  step {s:2} t={:3} delta={:.2}: preview {:.1} dB, mean {:.1} dB",
                log.records[s].t,
                log.records[s].delta,
                psnr(&psi_t, &pair.hq, 2.0).unwrap(),
                psnr(&z_t, &pair.hq, 2.0).unwrap()
            );
        }
    }
}

#[test]
fn band_ssim_comparison() {
    let dir = match std::env::var("PROBE_DIR") { Ok(d) => d, Err(_) => return };
    let mut cfg = RunConfig::default();
    for s in ["nets.channels=12", "nets.context_dim=24", "nets.context_tokens=6",
              "sampler.cfg_scale=2.0", "data.eval_count=16"] {
        cfg.apply_set(s).unwrap();
    }
    cfg.out_dir = format!("{dir}/probe_band");
    for mode in ["adares", "no_reference"] {
        let mut c = cfg.clone();
        c.apply_set(&format!("sampler.mode={mode}")).unwrap();
        let summary = previr::commands::cmd_restore(
            &c,
            &previr::commands::RestoreOptions {
                ckpt: Some(format!("{dir}/aggregator.ckpt")),
                level: Some("mild".into()),
                out: Some(format!("{dir}/probe_band_{mode}")),
                ..Default::default()
            },
        )
        .unwrap();
        eprintln!(
            "{mode}: psnr {:.2} ssim {:.4} band_ssim {:.4}",
            summary.mean_psnr_restored, summary.mean_ssim_restored, summary.mean_band_ssim_restored
        );
    }
}

#[test]
fn creative_probe() {
    let dir = match std::env::var("PROBE_DIR") { Ok(d) => d, Err(_) => return };
    let mut cfg = RunConfig::default();
    for s in ["nets.channels=12", "nets.context_dim=24", "nets.context_tokens=6", "sampler.cfg_scale=2.0"] {
        cfg.apply_set(s).unwrap();
    }
    let ck = Checkpoint::load(format!("{dir}/aggregator.ckpt")).unwrap();
    let pipeline = Pipeline::from_checkpoint(&cfg, &ck).unwrap();
    pipeline.nets.freeze();
    let rows = eval_set(DegradeLevel::Down4, 16, 55);
    let grid = inference_grid(256, 30).unwrap();
    let mut wins = 0;
    for (i, row) in rows.iter().enumerate() {
        let pair = generate_pair(row).unwrap();
        let target = (pair.class_id + 1) % 4;
        let mut sampler = cfg.sampler_config().unwrap();
        sampler.creative = Some(previr_core::sampler::CreativeSpec { target_class: target, cutoff: 15 });
        let mut rng = Rng::new(4040).derive(i as u64);
        let (creative, _) = previr_core::sampler::sample_restore(
            &pipeline.nets, &pipeline.schedule, &sampler, &pair.lq, target, &mut rng).unwrap();
        // unconditional prior sample
        let zero_ctx = Tensor::zeros(&[6, 24]);
        let tokens = pipeline.nets.class_emb.tokens(target).unwrap();
        let mut rng = Rng::new(5050).derive(i as u64);
        let mut z = Tensor::randn(&[1, 24, 24], &mut rng).mul_scalar(pipeline.schedule.beta(grid[0])).unwrap();
        for s in 0..30 {
            let (t, t_next) = (grid[s], grid[s + 1]);
            let eps = pipeline.nets.denoiser.forward(&z, t, &tokens, &zero_ctx, None, 0.0).unwrap();
            let x0 = x0_from_eps(&z, &eps, t, &pipeline.schedule).unwrap().clamp(-1.0, 1.0).unwrap();
            z = previr_core::diffusion::ddim_step(&z, &x0, t, t_next, &pipeline.schedule).unwrap().detach();
        }
        let uncond = z.clamp(-1.0, 1.0).unwrap();
        let dl = previr_core::metrics::downsample_box(&pair.lq, 4).unwrap();
        let c_l2 = previr_core::metrics::mean_sq_diff(&previr_core::metrics::downsample_box(&creative, 4).unwrap(), &dl).unwrap();
        let u_l2 = previr_core::metrics::mean_sq_diff(&previr_core::metrics::downsample_box(&uncond, 4).unwrap(), &dl).unwrap();
        if c_l2 < u_l2 { wins += 1; }
        if i < 4 { eprintln!("trial {i}: creative_l2 {c_l2:.4} vs uncond_l2 {u_l2:.4} {}", if c_l2 < u_l2 {"WIN"} else {"loss"}); }
    }
    eprintln!("creative wins: {wins}/16");
}
