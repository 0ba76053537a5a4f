//! File formats: PGM images, CSV tables, the dataset manifest.

use std::io::Write;
use std::path::Path;

use previr_core::data::{DegradeLevel, DegradeSpec, ManifestRow, Split};
use previr_core::metrics::{MetricReport, TrajectoryStats};
use previr_core::sampler::TrajectoryLog;
use previr_core::Tensor;

use crate::error::{runtime, usage, Result};

/// Writes a `[1, h, w]` image in `[-1, 1]` as binary 8-bit PGM (P5).
pub fn write_pgm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = match img.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(runtime(format!("write_pgm: expected [1, h, w], got {s:?}"))),
    };
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    img.with_data(|d| {
        for &v in d {
            let byte = (((v + 1.0) * 0.5 * 255.0) + 0.5).clamp(0.0, 255.0) as u8;
            out.push(byte);
        }
    });
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a binary 8-bit PGM back into a `[1, h, w]` tensor in `[-1, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| usage(format!("cannot read image '{}': {e}", path.display())))?;
    let mut fields = Vec::new();
    let mut pos = 0usize;
    // header: P5, width, height, maxval; '#' comments allowed
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(runtime(format!("'{}' is not a binary PGM", path.display())));
    }
    let w: usize = fields[1].parse().map_err(|_| runtime("bad PGM width".to_string()))?;
    let h: usize = fields[2].parse().map_err(|_| runtime("bad PGM height".to_string()))?;
    let maxval: f32 = fields[3].parse().map_err(|_| runtime("bad PGM maxval".to_string()))?;
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(runtime(format!("PGM '{}' truncated", path.display())));
    }
    let data: Vec<f32> =
        bytes[pos..pos + w * h].iter().map(|&b| b as f32 / maxval * 2.0 - 1.0).collect();
    Tensor::from_vec(&[1, h, w], data).map_err(|e| runtime(e.to_string()))
}

fn open_out(path: impl AsRef<Path>) -> Result<std::fs::File> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(std::fs::File::create(path)?)
}

pub fn write_schedule_csv(schedule: &previr_core::diffusion::NoiseSchedule, path: impl AsRef<Path>) -> Result<()> {
    let mut f = open_out(path)?;
    writeln!(f, "t,alpha,beta")?;
    for (t, a, b) in schedule.rows() {
        writeln!(f, "{t},{a},{b}")?;
    }
    Ok(())
}

pub fn write_manifest_csv(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = open_out(path)?;
    writeln!(
        f,
        "index,split,class_id,seed,level,blur_sigma,down_factor,noise_sigma,quant_levels,second_pass,blur_sigma2,noise_sigma2"
    )?;
    for r in rows {
        let (second, b2, n2) = match r.spec.second {
            Some((b, n)) => (1, b, n),
            None => (0, 0.0, 0.0),
        };
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.split.name(),
            r.class_id,
            r.seed,
            r.level.name(),
            r.spec.blur_sigma,
            r.spec.down_factor,
            r.spec.noise_sigma,
            r.spec.quant_levels,
            second,
            b2,
            n2
        )?;
    }
    Ok(())
}

pub fn read_manifest_csv(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read manifest '{}': {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 12 {
            return Err(runtime(format!("manifest line {}: expected 12 fields", i + 1)));
        }
        let num = |idx: usize| -> Result<f32> {
            parts[idx].parse().map_err(|_| runtime(format!("manifest line {}: bad number", i + 1)))
        };
        let spec = DegradeSpec {
            blur_sigma: num(5)?,
            down_factor: num(6)? as u32,
            noise_sigma: num(7)?,
            quant_levels: num(8)? as u32,
            second: if num(9)? != 0.0 { Some((num(10)?, num(11)?)) } else { None },
        };
        rows.push(ManifestRow {
            index: parts[0].parse().map_err(|_| runtime("bad index".to_string()))?,
            split: Split::parse(parts[1]).map_err(|e| runtime(e.to_string()))?,
            class_id: parts[2].parse().map_err(|_| runtime("bad class".to_string()))?,
            seed: parts[3].parse().map_err(|_| runtime("bad seed".to_string()))?,
            level: DegradeLevel::parse(parts[4]).map_err(|e| runtime(e.to_string()))?,
            spec,
        });
    }
    Ok(rows)
}

/// `step,loss` pairs, one row per logged step.
pub fn write_loss_csv(rows: &[(usize, f32)], path: impl AsRef<Path>) -> Result<()> {
    let mut f = open_out(path)?;
    writeln!(f, "step,loss")?;
    for (step, loss) in rows {
        writeln!(f, "{step},{loss}")?;
    }
    Ok(())
}

/// Distillation progress: the consistency metric column repeats the most
/// recent evaluation.
pub fn write_distill_csv(rows: &[(usize, f32, f32)], path: impl AsRef<Path>) -> Result<()> {
    let mut f = open_out(path)?;
    writeln!(f, "step,loss,self_consistency")?;
    for (step, loss, sc) in rows {
        writeln!(f, "{step},{loss},{sc}")?;
    }
    Ok(())
}

pub fn write_trajectory_csv(log: &TrajectoryLog, path: impl AsRef<Path>) -> Result<()> {
    let mut f = open_out(path)?;
    writeln!(f, "step,t,dist_preview_mean,dist_temporal,delta")?;
    for r in &log.records {
        writeln!(f, "{},{},{},{},{}", r.step, r.t, r.dist_preview_mean, r.dist_temporal, r.delta)?;
    }
    Ok(())
}

pub fn write_metrics_csv(report: &MetricReport, indices: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut f = open_out(path)?;
    writeln!(f, "index,psnr,ssim")?;
    for ((idx, p), s) in indices.iter().zip(&report.psnr).zip(&report.ssim) {
        writeln!(f, "{idx},{p},{s}")?;
    }
    writeln!(f, "mean,{},{}", report.mean_psnr, report.mean_ssim)?;
    writeln!(f, "std,{},{}", report.std_psnr, report.std_ssim)?;
    Ok(())
}

/// One CSV per trajectory panel: per-step per-level means.
pub fn write_panel_csv(
    stats: &TrajectoryStats,
    panel: &[Vec<f32>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut f = open_out(path)?;
    write!(f, "step,t")?;
    for level in &stats.levels {
        write!(f, ",{level}")?;
    }
    writeln!(f)?;
    for (i, t) in stats.t_values.iter().enumerate() {
        write!(f, "{i},{t}")?;
        for series in panel {
            write!(f, ",{}", series[i])?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Appends one reproducibility line per run.
pub fn append_run_log(out_dir: &str, command: &str, config_hash: &str, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(Path::new(out_dir).join("runs.log"))?;
    writeln!(
        f,
        "cmd={command} config_hash={config_hash} seed={seed} version={}",
        env!("CARGO_PKG_VERSION")
    )?;
    Ok(())
}
