//! Procedural training images and the synthetic degradation pipeline.
//!
//! High-quality images are 24x24 grayscale renders of four shape classes
//! with randomized placement, contrast and a low-amplitude value-noise
//! texture. Low-quality counterparts run through a fixed-order pipeline:
//! gaussian blur, down/upsampling, additive noise, uniform quantization,
//! optionally a milder second pass. Everything regenerates bit-exactly from
//! `(spec, seed)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Error, Result, Rng, Tensor};

pub const IMAGE_SIZE: usize = 24;
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] =
        [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle, ShapeClass::Cross];

    pub fn from_id(id: usize) -> Result<ShapeClass> {
        ShapeClass::ALL.get(id).copied().ok_or(Error::InvalidArgument {
            op: "shape_class",
            detail: format!("class id {id} out of range"),
        })
    }

    pub fn id(&self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
            ShapeClass::Cross => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }
}

/// Parameters of one rendered shape.
#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub center: (f32, f32),
    /// Full extent (diameter / side length) in pixels.
    pub size: f32,
    pub fg: f32,
    pub bg: f32,
    pub texture_amp: f32,
    pub texture_seed: u64,
}

impl ShapeSpec {
    pub fn sample(class: ShapeClass, rng: &mut Rng) -> ShapeSpec {
        let center = (rng.next_range(6.0, 18.0), rng.next_range(6.0, 18.0));
        let size = rng.next_range(4.0, 8.0);
        let (fg, bg) = loop {
            let fg = rng.next_range(-1.0, 1.0);
            let bg = rng.next_range(-1.0, 1.0);
            if (fg - bg).abs() >= 0.5 {
                break (fg, bg);
            }
        };
        ShapeSpec {
            class,
            center,
            size,
            fg,
            bg,
            texture_amp: rng.next_range(0.03, 0.15),
            texture_seed: rng.next_u64(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Error::InvalidArgument { op: "render_shape", detail };
        let (cx, cy) = self.center;
        if !(6.0..=18.0).contains(&cx) || !(6.0..=18.0).contains(&cy) {
            return Err(bad(format!("center ({cx}, {cy}) outside [6, 18]^2")));
        }
        if !(4.0..=8.0).contains(&self.size) {
            return Err(bad(format!("size {} outside [4, 8]", self.size)));
        }
        if self.fg.abs() > 1.0 || self.bg.abs() > 1.0 {
            return Err(bad(format!("intensities ({}, {}) outside [-1, 1]", self.fg, self.bg)));
        }
        if (self.fg - self.bg).abs() < 0.5 {
            return Err(bad(format!("contrast {} below 0.5", (self.fg - self.bg).abs())));
        }
        if !(0.0..=0.15).contains(&self.texture_amp) {
            return Err(bad(format!("texture amplitude {} outside [0, 0.15]", self.texture_amp)));
        }
        Ok(())
    }
}

fn signed_distance(class: ShapeClass, px: f32, py: f32, cx: f32, cy: f32, half: f32) -> f32 {
    let dx = px - cx;
    let dy = py - cy;
    match class {
        ShapeClass::Circle => libm::sqrtf(dx * dx + dy * dy) - half,
        ShapeClass::Square => dx.abs().max(dy.abs()) - half,
        ShapeClass::Triangle => {
            // upward triangle with vertices (0,-h), (-h,h), (h,h) around the
            // center; max over the three edge half-planes
            let e_bottom = dy - half;
            let n = libm::sqrtf(5.0) * half;
            let e_left = (-2.0 * half * dx - half * dy - half * half) / n;
            let e_right = (2.0 * half * dx - half * dy - half * half) / n;
            e_bottom.max(e_left).max(e_right)
        }
        ShapeClass::Cross => {
            let bar = half / 3.0;
            let horiz = (dx.abs() - half).max(dy.abs() - bar);
            let vert = (dx.abs() - bar).max(dy.abs() - half);
            horiz.min(vert)
        }
    }
}

/// Bilinear value noise over a coarse grid, amplitude-scaled.
fn texture_field(seed: u64, amp: f32) -> Vec<f32> {
    const CELL: usize = 4;
    const GRID: usize = IMAGE_SIZE / CELL + 1;
    let mut rng = Rng::new(seed);
    let mut nodes = [0.0f32; GRID * GRID];
    for v in nodes.iter_mut() {
        *v = rng.next_range(-1.0, 1.0);
    }
    let mut out = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let fx = x as f32 / CELL as f32;
            let fy = y as f32 / CELL as f32;
            let (x0, y0) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
            let n00 = nodes[y0 * GRID + x0];
            let n10 = nodes[y0 * GRID + x0 + 1];
            let n01 = nodes[(y0 + 1) * GRID + x0];
            let n11 = nodes[(y0 + 1) * GRID + x0 + 1];
            let top = n00 + (n10 - n00) * tx;
            let bot = n01 + (n11 - n01) * tx;
            out[y * IMAGE_SIZE + x] = amp * (top + (bot - top) * ty);
        }
    }
    out
}

/// Deterministic antialiased render of `spec` as a `[1, 24, 24]` tensor in
/// `[-1, 1]`.
pub fn render_shape(spec: &ShapeSpec) -> Result<Tensor> {
    spec.validate()?;
    let half = spec.size / 2.0;
    let texture = texture_field(spec.texture_seed, spec.texture_amp);
    let mut data = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            let d = signed_distance(spec.class, px, py, spec.center.0, spec.center.1, half);
            let coverage = (0.5 - d).clamp(0.0, 1.0);
            let v = spec.bg + (spec.fg - spec.bg) * coverage + texture[y * IMAGE_SIZE + x];
            data[y * IMAGE_SIZE + x] = v.clamp(-1.0, 1.0);
        }
    }
    Tensor::from_vec(&[1, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// One degradation recipe, applied in fixed order:
/// blur, resize down/up, noise, quantize, then an optional milder second
/// pass of blur and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradeSpec {
    pub blur_sigma: f32,
    pub down_factor: u32,
    pub noise_sigma: f32,
    /// 0 means no quantization.
    pub quant_levels: u32,
    /// `(blur_sigma, noise_sigma)` of the second pass, if any.
    pub second: Option<(f32, f32)>,
}

impl DegradeSpec {
    pub fn identity() -> DegradeSpec {
        DegradeSpec { blur_sigma: 0.0, down_factor: 1, noise_sigma: 0.0, quant_levels: 0, second: None }
    }

    pub fn is_identity(&self) -> bool {
        self.blur_sigma == 0.0
            && self.down_factor == 1
            && self.noise_sigma == 0.0
            && self.quant_levels == 0
            && self.second.is_none()
    }
}

fn gaussian_blur(data: &mut Vec<f32>, w: usize, h: usize, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (libm::ceilf(3.0 * sigma) as usize).clamp(1, 7);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0f32;
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        let v = libm::expf(-d * d / (2.0 * sigma * sigma));
        kernel.push(v);
        sum += v;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let reflect = |i: isize, len: usize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i as usize >= len {
            i = 2 * (len as isize - 1) - i;
        }
        i as usize
    };
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, k) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - radius as isize, w);
                acc += k * data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, k) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - radius as isize, h);
                acc += k * tmp[sy * w + x];
            }
            data[y * w + x] = acc;
        }
    }
}

fn box_down(data: &[f32], size: usize, f: usize) -> Vec<f32> {
    let s = size / f;
    let mut out = vec![0.0f32; s * s];
    let inv = 1.0 / (f * f) as f32;
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0f32;
            for dy in 0..f {
                for dx in 0..f {
                    acc += data[(y * f + dy) * size + x * f + dx];
                }
            }
            out[y * s + x] = acc * inv;
        }
    }
    out
}

fn bilinear_up(data: &[f32], src: usize, dst: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dst * dst];
    let scale = src as f32 / dst as f32;
    for y in 0..dst {
        let fy = ((y as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
        let y0 = fy as usize;
        let y1 = (y0 + 1).min(src - 1);
        let ty = fy - y0 as f32;
        for x in 0..dst {
            let fx = ((x as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
            let x0 = fx as usize;
            let x1 = (x0 + 1).min(src - 1);
            let tx = fx - x0 as f32;
            let top = data[y0 * src + x0] * (1.0 - tx) + data[y0 * src + x1] * tx;
            let bot = data[y1 * src + x0] * (1.0 - tx) + data[y1 * src + x1] * tx;
            out[y * dst + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn quantize(data: &mut [f32], levels: u32) {
    if levels < 2 {
        return;
    }
    let l = (levels - 1) as f32;
    for v in data.iter_mut() {
        let unit = (*v + 1.0) * 0.5;
        *v = libm::roundf(unit * l) / l * 2.0 - 1.0;
    }
}

/// Applies the degradation pipeline; identity specs return the input
/// bit-exactly.
pub fn degrade(hq: &Tensor, spec: &DegradeSpec, rng: &mut Rng) -> Result<Tensor> {
    let (h, w) = match hq.shape() {
        [1, h, w] => (*h, *w),
        s => {
            return Err(Error::ShapeMismatch {
                op: "degrade",
                detail: format!("expected [1, h, w], got {}", crate::tensor::fmt_shape(s)),
            })
        }
    };
    if h != w {
        return Err(Error::InvalidArgument { op: "degrade", detail: "image must be square".into() });
    }
    if spec.is_identity() {
        return Ok(hq.detach());
    }
    let mut data = hq.to_vec();
    gaussian_blur(&mut data, w, h, spec.blur_sigma);
    let f = spec.down_factor as usize;
    if f > 1 {
        if h % f != 0 {
            return Err(Error::InvalidArgument {
                op: "degrade",
                detail: format!("down factor {f} does not divide {h}"),
            });
        }
        let small = box_down(&data, h, f);
        data = bilinear_up(&small, h / f, h);
    }
    if spec.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v += spec.noise_sigma * rng.next_normal();
        }
    }
    quantize(&mut data, spec.quant_levels);
    if let Some((blur2, noise2)) = spec.second {
        gaussian_blur(&mut data, w, h, blur2);
        if noise2 > 0.0 {
            for v in data.iter_mut() {
                *v += noise2 * rng.next_normal();
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Tensor::from_vec(&[1, h, w], data)
}

/// The degradation levels used for evaluation and the trajectory analysis,
/// plus the training draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradeLevel {
    Hq,
    Down4,
    Down8Analog,
    Multi,
    Mild,
    Random,
}

impl DegradeLevel {
    pub const ANALYSIS: [DegradeLevel; 4] =
        [DegradeLevel::Hq, DegradeLevel::Down4, DegradeLevel::Down8Analog, DegradeLevel::Multi];

    pub fn name(&self) -> &'static str {
        match self {
            DegradeLevel::Hq => "hq",
            DegradeLevel::Down4 => "down4",
            DegradeLevel::Down8Analog => "down8_analog",
            DegradeLevel::Multi => "multi",
            DegradeLevel::Mild => "mild",
            DegradeLevel::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<DegradeLevel> {
        match s {
            "hq" => Ok(DegradeLevel::Hq),
            "down4" => Ok(DegradeLevel::Down4),
            "down8_analog" => Ok(DegradeLevel::Down8Analog),
            "multi" => Ok(DegradeLevel::Multi),
            "mild" => Ok(DegradeLevel::Mild),
            "random" => Ok(DegradeLevel::Random),
            other => Err(Error::InvalidArgument {
                op: "degrade_level",
                detail: format!("unknown level '{other}'"),
            }),
        }
    }
}

/// The full randomized pipeline with an optional second pass.
pub fn sample_multi(rng: &mut Rng, p2: f32) -> DegradeSpec {
    let factor = if rng.next_bool(0.5) { 2 } else { 4 };
    let quant = [32u32, 16, 8][rng.next_below(3)];
    let second = if rng.next_bool(p2) {
        Some((rng.next_range(0.2, 0.8), rng.next_range(0.02, 0.08)))
    } else {
        None
    };
    DegradeSpec {
        blur_sigma: rng.next_range(0.5, 1.5),
        down_factor: factor,
        noise_sigma: rng.next_range(0.05, 0.15),
        quant_levels: quant,
        second,
    }
}

/// Draws a degradation recipe for the given level.
pub fn sample_level(level: DegradeLevel, rng: &mut Rng) -> DegradeSpec {
    match level {
        DegradeLevel::Hq => DegradeSpec::identity(),
        DegradeLevel::Down4 => DegradeSpec { down_factor: 2, ..DegradeSpec::identity() },
        DegradeLevel::Down8Analog => DegradeSpec { down_factor: 4, ..DegradeSpec::identity() },
        DegradeLevel::Multi => sample_multi(rng, 0.5),
        DegradeLevel::Mild => DegradeSpec {
            blur_sigma: rng.next_range(0.2, 0.6),
            down_factor: 2,
            noise_sigma: rng.next_range(0.01, 0.05),
            quant_levels: 0,
            second: None,
        },
        DegradeLevel::Random => {
            // training mixture spanning identity to heavy multi-degradation
            let factor = [1u32, 1, 2, 2, 4][rng.next_below(5)];
            let quant = [0u32, 0, 32, 16, 8][rng.next_below(5)];
            let second = if rng.next_bool(0.2) {
                Some((rng.next_range(0.2, 0.6), rng.next_range(0.01, 0.05)))
            } else {
                None
            };
            DegradeSpec {
                blur_sigma: rng.next_range(0.0, 1.2),
                down_factor: factor,
                noise_sigma: rng.next_range(0.0, 0.12),
                quant_levels: quant,
                second,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument { op: "split", detail: format!("unknown split '{other}'") }),
        }
    }
}

/// One dataset entry; the images regenerate on demand from `(seed, spec)`.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub index: usize,
    pub split: Split,
    pub class_id: usize,
    pub seed: u64,
    pub level: DegradeLevel,
    pub spec: DegradeSpec,
}

/// An aligned HQ/LQ pair with its provenance.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub hq: Tensor,
    pub lq: Tensor,
    pub spec: DegradeSpec,
    pub class_id: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

/// Builds the dataset manifest: classes stratified round-robin, per-row
/// seeds derived from the root seed, degradation specs drawn per row.
/// Train/val rows use the `random` level, test rows use `mild`.
pub fn build_manifest(cfg: &DatasetConfig) -> Vec<ManifestRow> {
    let root = Rng::new(cfg.seed);
    let total = cfg.train + cfg.val + cfg.test;
    let mut rows = Vec::with_capacity(total);
    for index in 0..total {
        let (split, level) = if index < cfg.train {
            (Split::Train, DegradeLevel::Random)
        } else if index < cfg.train + cfg.val {
            (Split::Val, DegradeLevel::Random)
        } else {
            (Split::Test, DegradeLevel::Mild)
        };
        let mut row_rng = root.derive(index as u64);
        let seed = row_rng.next_u64();
        let spec = sample_level(level, &mut row_rng);
        rows.push(ManifestRow { index, split, class_id: index % NUM_CLASSES, seed, level, spec });
    }
    rows
}

/// A fresh evaluation set at one degradation level, independent of the
/// training manifest.
pub fn eval_set(level: DegradeLevel, count: usize, seed: u64) -> Vec<ManifestRow> {
    let root = Rng::new(seed);
    (0..count)
        .map(|index| {
            let mut row_rng = root.derive(index as u64);
            let seed = row_rng.next_u64();
            let spec = sample_level(level, &mut row_rng);
            ManifestRow { index, split: Split::Test, class_id: index % NUM_CLASSES, seed, level, spec }
        })
        .collect()
}

/// Regenerates the image pair for a manifest row, bit-exactly.
pub fn generate_pair(row: &ManifestRow) -> Result<ImagePair> {
    let mut rng = Rng::new(row.seed);
    let class = ShapeClass::from_id(row.class_id)?;
    let shape = ShapeSpec::sample(class, &mut rng);
    let hq = render_shape(&shape)?;
    let lq = degrade(&hq, &row.spec, &mut rng)?;
    Ok(ImagePair { hq, lq, spec: row.spec.clone(), class_id: row.class_id, seed: row.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{laplacian_norm, psnr};

    fn plain_spec(class: ShapeClass) -> ShapeSpec {
        ShapeSpec {
            class,
            center: (12.0, 12.0),
            size: 8.0,
            fg: 1.0,
            bg: -1.0,
            texture_amp: 0.0,
            texture_seed: 0,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = Rng::new(5);
        let spec = ShapeSpec::sample(ShapeClass::Triangle, &mut rng);
        let a = render_shape(&spec).unwrap();
        let b = render_shape(&spec).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn square_geometry() {
        let img = render_shape(&plain_spec(ShapeClass::Square)).unwrap();
        let data = img.to_vec();
        assert_eq!(data[12 * IMAGE_SIZE + 12], 1.0);
        assert_eq!(data[IMAGE_SIZE + 1], -1.0);
    }

    #[test]
    fn circle_mean_matches_analytic_area() {
        let mut spec = plain_spec(ShapeClass::Circle);
        spec.fg = 1.0;
        spec.bg = 0.0;
        let img = render_shape(&spec).unwrap();
        let mean: f64 = img.with_data(|d| d.iter().map(|&v| v as f64).sum::<f64>()) / 576.0;
        let analytic = core::f64::consts::PI * 16.0 / 576.0;
        let rel = (mean - analytic).abs() / analytic;
        assert!(rel < 0.02, "mean {mean} vs analytic {analytic} (rel {rel})");
    }

    #[test]
    fn out_of_range_spec_errors() {
        let mut spec = plain_spec(ShapeClass::Circle);
        spec.size = 20.0;
        assert!(render_shape(&spec).is_err());
        let mut spec = plain_spec(ShapeClass::Circle);
        spec.bg = 0.8; // contrast 0.2
        assert!(render_shape(&spec).is_err());
    }

    #[test]
    fn identity_degrade_is_bit_exact() {
        let mut rng = Rng::new(9);
        let spec = ShapeSpec::sample(ShapeClass::Cross, &mut rng);
        let hq = render_shape(&spec).unwrap();
        let lq = degrade(&hq, &DegradeSpec::identity(), &mut rng).unwrap();
        let same = hq.with_data(|a| {
            lq.with_data(|b| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
        });
        assert!(same);
    }

    #[test]
    fn noise_only_psnr_matches_analytic() {
        // sigma = 0.1 on range 2 images: PSNR ~ 10 log10(4 / 0.01) = 26.02 dB
        let base = ShapeSpec {
            class: ShapeClass::Square,
            center: (12.0, 12.0),
            size: 6.0,
            fg: 0.5,
            bg: -0.5,
            texture_amp: 0.05,
            texture_seed: 77,
        };
        let hq = render_shape(&base).unwrap();
        let spec = DegradeSpec { noise_sigma: 0.1, ..DegradeSpec::identity() };
        let mut rng = Rng::new(1234);
        let mut acc = 0.0f64;
        let n = 1000;
        for _ in 0..n {
            let lq = degrade(&hq, &spec, &mut rng).unwrap();
            acc += psnr(&lq, &hq, 2.0).unwrap() as f64;
        }
        let mean = acc / n as f64;
        let analytic = 10.0 * libm::log10(4.0 / 0.01);
        assert!((mean - analytic).abs() < 0.5, "mean PSNR {mean} vs {analytic}");
    }

    #[test]
    fn downsample_removes_high_frequency() {
        // checkerboard loses Laplacian energy through the resize leg
        let mut data = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                data[y * IMAGE_SIZE + x] = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let img = Tensor::from_vec(&[1, IMAGE_SIZE, IMAGE_SIZE], data).unwrap();
        let spec = DegradeSpec { down_factor: 4, ..DegradeSpec::identity() };
        let mut rng = Rng::new(2);
        let lq = degrade(&img, &spec, &mut rng).unwrap();
        assert!(laplacian_norm(&lq).unwrap() < laplacian_norm(&img).unwrap());
    }

    #[test]
    fn level_specs_match_contract() {
        let mut rng = Rng::new(3);
        assert!(sample_level(DegradeLevel::Hq, &mut rng).is_identity());
        let d4 = sample_level(DegradeLevel::Down4, &mut rng);
        assert_eq!((d4.down_factor, d4.blur_sigma, d4.noise_sigma), (2, 0.0, 0.0));
        let d8 = sample_level(DegradeLevel::Down8Analog, &mut rng);
        assert_eq!(d8.down_factor, 4);
        for _ in 0..20 {
            assert!(sample_multi(&mut rng, 0.0).second.is_none());
        }
    }

    #[test]
    fn level_psnr_ordering() {
        let rng = Rng::new(4);
        let mut means = [0.0f64; 4];
        let draws = 256;
        for (li, level) in DegradeLevel::ANALYSIS.iter().enumerate() {
            for i in 0..draws {
                let mut pr = rng.derive((li * draws + i) as u64);
                let class = ShapeClass::from_id(i % NUM_CLASSES).unwrap();
                let shape = ShapeSpec::sample(class, &mut pr);
                let hq = render_shape(&shape).unwrap();
                let spec = sample_level(*level, &mut pr);
                let lq = degrade(&hq, &spec, &mut pr).unwrap();
                means[li] += psnr(&lq, &hq, 2.0).unwrap() as f64 / draws as f64;
            }
        }
        assert!(
            means[0] > means[1] && means[1] > means[2] && means[2] > means[3],
            "PSNR means not ordered: {means:?}"
        );
    }

    #[test]
    fn manifest_reproducible_and_stratified() {
        let cfg = DatasetConfig { train: 40, val: 8, test: 8, seed: 11 };
        let a = build_manifest(&cfg);
        let b = build_manifest(&cfg);
        assert_eq!(a.len(), 56);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.seed, rb.seed);
            assert_eq!(ra.spec, rb.spec);
        }
        let counts = a.iter().filter(|r| r.split == Split::Train).fold([0usize; 4], |mut c, r| {
            c[r.class_id] += 1;
            c
        });
        assert_eq!(counts, [10, 10, 10, 10]);
    }

    #[test]
    fn pairs_regenerate_bit_exactly() {
        let cfg = DatasetConfig { train: 4, val: 0, test: 0, seed: 21 };
        let rows = build_manifest(&cfg);
        let p1 = generate_pair(&rows[2]).unwrap();
        let p2 = generate_pair(&rows[2]).unwrap();
        assert_eq!(p1.hq.to_vec(), p2.hq.to_vec());
        assert_eq!(p1.lq.to_vec(), p2.lq.to_vec());
        assert_eq!(p1.class_id, 2);
    }
}
