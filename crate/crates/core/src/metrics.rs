//! Full-reference quality metrics and trajectory diagnostics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::sampler::TrajectoryLog;
use crate::tensor::{Error, Result, Tensor};

pub const PSNR_CAP: f32 = 99.0;

fn image_hw(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        [h, w] => Ok((*h, *w)),
        s => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected an image, got {}", crate::tensor::fmt_shape(s)),
        }),
    }
}

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!(
                "{} vs {}",
                crate::tensor::fmt_shape(a.shape()),
                crate::tensor::fmt_shape(b.shape())
            ),
        });
    }
    Ok(())
}

/// Mean squared difference, accumulated in f64.
pub fn mean_sq_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    check_same(a, b, "mean_sq_diff")?;
    let n = a.numel();
    let acc: f64 = a.with_data(|x| {
        b.with_data(|y| x.iter().zip(y).map(|(&u, &v)| (u as f64 - v as f64) * (u as f64 - v as f64)).sum())
    });
    Ok((acc / n as f64) as f32)
}

/// Peak signal-to-noise ratio in dB, capped at 99.
pub fn psnr(a: &Tensor, b: &Tensor, data_range: f32) -> Result<f32> {
    check_same(a, b, "psnr")?;
    let mse = mean_sq_diff(a, b)? as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    let v = 10.0 * libm::log10((data_range as f64) * (data_range as f64) / mse);
    Ok((v as f32).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let v = libm::exp(-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
            k[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Mean structural similarity over all valid 7x7 windows (gaussian
/// weighting, sigma 1.5), with the canonical constants scaled by
/// `data_range`.
pub fn ssim_with_range(a: &Tensor, b: &Tensor, data_range: f32) -> Result<f32> {
    check_same(a, b, "ssim")?;
    let (h, w) = image_hw(a, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument {
            op: "ssim",
            detail: format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let c1 = (0.01 * data_range as f64) * (0.01 * data_range as f64);
    let c2 = (0.03 * data_range as f64) * (0.03 * data_range as f64);
    let kernel = ssim_kernel();
    let va = a.to_vec();
    let vb = b.to_vec();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let (mut ma, mut mb) = (0.0f64, 0.0f64);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let kv = kernel[ky * SSIM_WINDOW + kx];
                    let idx = (oy + ky) * w + ox + kx;
                    ma += kv * va[idx] as f64;
                    mb += kv * vb[idx] as f64;
                }
            }
            let (mut sa, mut sb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let kv = kernel[ky * SSIM_WINDOW + kx];
                    let idx = (oy + ky) * w + ox + kx;
                    let da = va[idx] as f64 - ma;
                    let db = vb[idx] as f64 - mb;
                    sa += kv * da * da;
                    sb += kv * db * db;
                    sab += kv * da * db;
                }
            }
            let num = (2.0 * ma * mb + c1) * (2.0 * sab + c2);
            let den = (ma * ma + mb * mb + c1) * (sa + sb + c2);
            acc += num / den;
            count += 1;
        }
    }
    Ok((acc / count as f64) as f32)
}

/// SSIM over the `[-1, 1]` image range used throughout the pipeline.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f32> {
    ssim_with_range(a, b, 2.0)
}

/// 3x3 Laplacian filter with reflect padding; isolates the high-frequency
/// band.
pub fn laplacian(img: &Tensor) -> Result<Tensor> {
    let (h, w) = image_hw(img, "laplacian")?;
    let data = img.to_vec();
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= len {
            2 * len - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let up = data[reflect(y as isize - 1, h) * w + x];
            let down = data[reflect(y as isize + 1, h) * w + x];
            let left = data[y * w + reflect(x as isize - 1, w)];
            let right = data[y * w + reflect(x as isize + 1, w)];
            out[y * w + x] = up + down + left + right - 4.0 * data[y * w + x];
        }
    }
    Tensor::from_vec(&[1, h, w], out)
}

/// L2 norm of the Laplacian band.
pub fn laplacian_norm(img: &Tensor) -> Result<f32> {
    let lap = laplacian(img)?;
    let acc: f64 = lap.with_data(|d| d.iter().map(|&v| v as f64 * v as f64).sum());
    Ok(libm::sqrt(acc) as f32)
}

/// SSIM of the Laplacian bands of two images; compares reproduction of
/// high-frequency detail rather than absolute intensity.
pub fn band_ssim(a: &Tensor, b: &Tensor) -> Result<f32> {
    ssim_with_range(&laplacian(a)?, &laplacian(b)?, 2.0)
}

/// Box downsample by an integer factor; used by the structure-preservation
/// checks.
pub fn downsample_box(img: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = image_hw(img, "downsample_box")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument {
            op: "downsample_box",
            detail: format!("factor {factor} does not divide {h}x{w}"),
        });
    }
    let (sh, sw) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f32;
    let data = img.to_vec();
    let mut out = vec![0.0f32; sh * sw];
    for y in 0..sh {
        for x in 0..sw {
            let mut acc = 0.0f32;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += data[(y * factor + dy) * w + x * factor + dx];
                }
            }
            out[y * sw + x] = acc * inv;
        }
    }
    Tensor::from_vec(&[1, sh, sw], out)
}

/// Per-image scores plus aggregates over an evaluation set.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr: Vec<f32>,
    pub ssim: Vec<f32>,
    pub mean_psnr: f32,
    pub std_psnr: f32,
    pub mean_ssim: f32,
    pub std_ssim: f32,
}

impl MetricReport {
    pub fn from_pairs(pairs: &[(Tensor, Tensor)]) -> Result<MetricReport> {
        let mut ps = Vec::with_capacity(pairs.len());
        let mut ss = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            ps.push(psnr(a, b, 2.0)?);
            ss.push(ssim(a, b)?);
        }
        Ok(MetricReport::from_scores(ps, ss))
    }

    pub fn from_scores(psnr: Vec<f32>, ssim: Vec<f32>) -> MetricReport {
        let stats = |v: &[f32]| -> (f32, f32) {
            if v.is_empty() {
                return (0.0, 0.0);
            }
            let mean: f64 = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
            let var: f64 = v.iter().map(|&x| (x as f64 - mean) * (x as f64 - mean)).sum::<f64>()
                / v.len() as f64;
            (mean as f32, libm::sqrt(var) as f32)
        };
        let (mean_psnr, std_psnr) = stats(&psnr);
        let (mean_ssim, std_ssim) = stats(&ssim);
        MetricReport { psnr, ssim, mean_psnr, std_psnr, mean_ssim, std_ssim }
    }

    pub fn len(&self) -> usize {
        self.psnr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psnr.is_empty()
    }
}

/// Per-step means of the logged sampling quantities, grouped by degradation
/// level. One row of each table per executed sampler step.
#[derive(Debug, Clone)]
pub struct TrajectoryStats {
    pub levels: Vec<String>,
    /// Training-grid step of each sampler iteration.
    pub t_values: Vec<usize>,
    /// `[level][step]` mean of the preview-to-denoising-mean distance.
    pub preview_mean: Vec<Vec<f32>>,
    /// `[level][step]` mean of the preview temporal difference.
    pub temporal: Vec<Vec<f32>>,
    /// `[level][step]` mean of the quality indicator.
    pub delta: Vec<Vec<f32>>,
}

/// Aggregates trajectory logs per level. All logs must cover the same step
/// sequence; empty groups are an error.
pub fn trajectory_report(groups: &[(&str, Vec<&TrajectoryLog>)]) -> Result<TrajectoryStats> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument { op: "trajectory_report", detail: "no groups".into() });
    }
    let first = groups
        .first()
        .and_then(|(_, logs)| logs.first())
        .ok_or(Error::InvalidArgument { op: "trajectory_report", detail: "empty group".into() })?;
    let t_values: Vec<usize> = first.records.iter().map(|r| r.t).collect();
    let steps = t_values.len();
    let mut stats = TrajectoryStats {
        levels: Vec::new(),
        t_values,
        preview_mean: Vec::new(),
        temporal: Vec::new(),
        delta: Vec::new(),
    };
    for (name, logs) in groups {
        if logs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "trajectory_report",
                detail: format!("level '{name}' has no logs"),
            });
        }
        let mut pm = vec![0.0f64; steps];
        let mut tm = vec![0.0f64; steps];
        let mut dl = vec![0.0f64; steps];
        for log in logs {
            if log.records.len() != steps {
                return Err(Error::InvalidArgument {
                    op: "trajectory_report",
                    detail: format!("log with {} steps in a {steps}-step group", log.records.len()),
                });
            }
            for (i, rec) in log.records.iter().enumerate() {
                if rec.t != stats.t_values[i] {
                    return Err(Error::InvalidArgument {
                        op: "trajectory_report",
                        detail: "logs cover different step grids".into(),
                    });
                }
                pm[i] += rec.dist_preview_mean as f64;
                tm[i] += rec.dist_temporal as f64;
                dl[i] += rec.delta as f64;
            }
        }
        let n = logs.len() as f64;
        stats.levels.push(String::from(*name));
        stats.preview_mean.push(pm.iter().map(|v| (v / n) as f32).collect());
        stats.temporal.push(tm.iter().map(|v| (v / n) as f32).collect());
        stats.delta.push(dl.iter().map(|v| (v / n) as f32).collect());
    }
    Ok(stats)
}

/// Fraction of steps in `[from_step, to_step)` at which the per-level mean
/// quality indicator is strictly decreasing in the listed group order.
pub fn strict_ordering_fraction(stats: &TrajectoryStats, from_step: usize, to_step: usize) -> Result<f32> {
    if stats.levels.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "strict_ordering_fraction",
            detail: "need at least two level groups".into(),
        });
    }
    let to_step = to_step.min(stats.t_values.len());
    if from_step >= to_step {
        return Err(Error::InvalidArgument {
            op: "strict_ordering_fraction",
            detail: format!("empty step range [{from_step}, {to_step})"),
        });
    }
    let mut ordered = 0usize;
    for i in from_step..to_step {
        let strictly = stats.delta.windows(2).all(|pair| pair[0][i] > pair[1][i]);
        if strictly {
            ordered += 1;
        }
    }
    Ok(ordered as f32 / (to_step - from_step) as f32)
}
