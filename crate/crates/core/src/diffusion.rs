//! Noise schedule, forward process, diffusion loss and the deterministic
//! DDIM step shared by all samplers.
//!
//! The forward process has marginals `N(alpha_t * x, beta_t^2 * I)` over a
//! discrete grid `t in [0, T]`. The schedule is variance preserving:
//! `alpha_t^2 + beta_t^2 = 1` at every step.

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::{Error, Result, Rng, Tensor};

/// Terminal angle margin of the cosine schedule, in radians.
///
/// The end of the grid keeps `alpha_T = sin(margin)` of signal instead of
/// exactly zero: recovering `x` from a stored f32 latent divides the storage
/// rounding (half an ulp of `z_t`) by `alpha_t`, so the 1e-5 round-trip
/// tolerance needs `alpha_T` around 3e-2. The residual signal at `t = T` is
/// far below visibility.
pub const SCHEDULE_ANGLE_MARGIN: f32 = 0.03;

/// Discrete variance-preserving schedule tables over `t in [0, T]`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    steps: usize,
    alpha: Vec<f32>,
    beta: Vec<f32>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_t = cos((t/T) * (pi/2 - margin))`,
    /// `beta_t = sin` of the same angle.
    pub fn cosine(steps: usize) -> Result<NoiseSchedule> {
        if steps < 2 {
            return Err(Error::InvalidArgument {
                op: "schedule",
                detail: format!("need at least 2 steps, got {steps}"),
            });
        }
        let span = core::f64::consts::FRAC_PI_2 - SCHEDULE_ANGLE_MARGIN as f64;
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut beta = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            let theta = (t as f64 / steps as f64) * span;
            alpha.push(libm::cos(theta) as f32);
            beta.push(libm::sin(theta) as f32);
        }
        NoiseSchedule::from_tables(alpha, beta)
    }

    /// Builds a schedule from explicit tables, validating the invariants.
    pub fn from_tables(alpha: Vec<f32>, beta: Vec<f32>) -> Result<NoiseSchedule> {
        if alpha.len() != beta.len() || alpha.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "schedule",
                detail: format!("tables must have equal length >= 2, got {} and {}", alpha.len(), beta.len()),
            });
        }
        let steps = alpha.len() - 1;
        let s = NoiseSchedule { steps, alpha, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: alloc::string::String| Error::InvalidArgument { op: "schedule", detail };
        if self.alpha[0] != 1.0 || self.beta[0] != 0.0 {
            return Err(fail(format!("endpoints: alpha_0 = {}, beta_0 = {}", self.alpha[0], self.beta[0])));
        }
        for t in 0..=self.steps {
            let (a, b) = (self.alpha[t] as f64, self.beta[t] as f64);
            if (a * a + b * b - 1.0).abs() > 1e-6 {
                return Err(fail(format!("variance-preserving identity broken at t = {t}")));
            }
            if t > 0 {
                if self.alpha[t] >= self.alpha[t - 1] {
                    return Err(fail(format!("alpha not strictly decreasing at t = {t}")));
                }
                if self.beta[t] <= self.beta[t - 1] {
                    return Err(fail(format!("beta not strictly increasing at t = {t}")));
                }
            }
        }
        Ok(())
    }

    /// Training grid length `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.beta[t]
    }

    /// `(t, alpha_t, beta_t)` rows for dumping/inspection.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f32, f32)> + '_ {
        (0..=self.steps).map(|t| (t, self.alpha[t], self.beta[t]))
    }

    fn check_step(&self, t: usize, op: &'static str) -> Result<()> {
        if t > self.steps {
            return Err(Error::InvalidArgument {
                op,
                detail: format!("step {t} outside grid [0, {}]", self.steps),
            });
        }
        Ok(())
    }
}

/// `K + 1` strictly decreasing steps from `T` down to `0`, uniformly spaced
/// on the training grid. The first `K` entries are where the networks are
/// evaluated; the trailing `0` is only ever a DDIM target.
pub fn inference_grid(total: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::InvalidArgument {
            op: "inference_grid",
            detail: format!("need 1 <= K <= T, got K = {k}, T = {total}"),
        });
    }
    let mut grid = Vec::with_capacity(k + 1);
    for i in 0..=k {
        let t = libm::round(total as f64 * (1.0 - i as f64 / k as f64)) as usize;
        grid.push(t);
    }
    for w in grid.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::InvalidArgument {
                op: "inference_grid",
                detail: format!("K = {k} does not embed strictly into T = {total}"),
            });
        }
    }
    Ok(grid)
}

/// A forward-process draw: `z_t = alpha_t * x + beta_t * eps`, with the
/// drawn noise retained.
#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub z_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// Noises `x` to step `t` using fresh standard-normal noise from `rng`.
pub fn add_noise(x: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<DiffusionSample> {
    schedule.check_step(t, "add_noise")?;
    let eps = Tensor::randn(x.shape(), rng);
    let z_t = x.mul_scalar(schedule.alpha(t))?.add(&eps.mul_scalar(schedule.beta(t))?)?;
    Ok(DiffusionSample { z_t, t, eps })
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_pred.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_loss",
            detail: format!(
                "{} vs {}",
                crate::tensor::fmt_shape(eps_pred.shape()),
                crate::tensor::fmt_shape(eps.shape())
            ),
        });
    }
    eps_pred.sub(eps)?.square()?.mean()
}

fn invert_eps(z_t: &Tensor, eps_pred: &Tensor, alpha: f32, beta: f32) -> Result<Tensor> {
    let recip = (1.0 / alpha as f64) as f32;
    z_t.sub(&eps_pred.mul_scalar(beta)?)?.mul_scalar(recip)
}

/// Denoising estimate of `x` from a noise prediction:
/// `(z_t - beta_t * eps_pred) / alpha_t`. `t = 0` returns `z_t` unchanged.
pub fn x0_from_eps(z_t: &Tensor, eps_pred: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t, "x0_from_eps")?;
    if t == 0 {
        return Ok(z_t.clone());
    }
    let alpha = schedule.alpha(t);
    if alpha < 1e-6 {
        return Err(Error::InvalidArgument {
            op: "x0_from_eps",
            detail: format!("alpha_{t} = {alpha} too small to invert"),
        });
    }
    invert_eps(z_t, eps_pred, alpha, schedule.beta(t))
}

fn ddim_combine(z_t: &Tensor, x0_hat: &Tensor, a_t: f32, b_t: f32, a_prev: f32, b_prev: f32) -> Result<Tensor> {
    let ratio = (b_prev as f64 / b_t as f64) as f32;
    x0_hat
        .mul_scalar(a_prev)?
        .add(&z_t.sub(&x0_hat.mul_scalar(a_t)?)?.mul_scalar(ratio)?)
}

/// Deterministic DDIM update from `t` to `t_prev`:
/// `alpha_prev * x0_hat + (beta_prev / beta_t) * (z_t - alpha_t * x0_hat)`.
pub fn ddim_step(
    z_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(t, "ddim_step")?;
    if t_prev > t {
        return Err(Error::InvalidArgument {
            op: "ddim_step",
            detail: format!("t_prev = {t_prev} must not exceed t = {t}"),
        });
    }
    if schedule.beta(t) == 0.0 {
        return Err(Error::InvalidArgument {
            op: "ddim_step",
            detail: format!("beta_{t} = 0: cannot step from a noiseless source"),
        });
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    ddim_combine(
        z_t,
        x0_hat,
        schedule.alpha(t),
        schedule.beta(t),
        schedule.alpha(t_prev),
        schedule.beta(t_prev),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(u, v)| (u - v).abs()).fold(0.0, f32::max)))
    }

    #[test]
    fn cosine_schedule_invariants() {
        for steps in [16usize, 100, 256] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert_eq!(s.alpha(0), 1.0);
            assert_eq!(s.beta(0), 0.0);
            assert!(s.alpha(steps) < 0.05, "terminal alpha {}", s.alpha(steps));
            s.validate().unwrap();
        }
    }

    #[test]
    fn inference_grid_shape_and_order() {
        let grid = inference_grid(256, 30).unwrap();
        assert_eq!(grid.len(), 31);
        assert_eq!(grid[0], 256);
        assert_eq!(*grid.last().unwrap(), 0);
        for w in grid.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn inference_grid_too_dense_errors() {
        assert!(inference_grid(10, 30).is_err());
    }

    #[test]
    fn add_noise_at_zero_is_identity() {
        let s = NoiseSchedule::cosine(64).unwrap();
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[1, 4, 4], &mut rng);
        let sample = add_noise(&x, 0, &s, &mut rng).unwrap();
        assert_eq!(sample.z_t.to_vec(), x.to_vec());
        assert_eq!(sample.eps.numel(), 16);
    }

    #[test]
    fn add_noise_of_zero_image_is_scaled_noise() {
        let s = NoiseSchedule::cosine(64).unwrap();
        let mut rng = Rng::new(4);
        let x = Tensor::zeros(&[1, 4, 4]);
        let t = 32;
        let sample = add_noise(&x, t, &s, &mut rng).unwrap();
        let expect = sample.eps.mul_scalar(s.beta(t)).unwrap();
        assert_eq!(sample.z_t.to_vec(), expect.to_vec());
    }

    #[test]
    fn add_noise_out_of_range_errors() {
        let s = NoiseSchedule::cosine(64).unwrap();
        let mut rng = Rng::new(5);
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(add_noise(&x, 65, &s, &mut rng).is_err());
    }

    #[test]
    fn add_noise_monte_carlo_mean() {
        // per-pixel mean over 10k draws concentrates at alpha_t * 0.5
        let s = NoiseSchedule::cosine(256).unwrap();
        let t = 128;
        let mut rng = Rng::new(7);
        let x = Tensor::full(&[1, 8, 8], 0.5);
        let draws = 10_000usize;
        let mut acc = vec![0.0f64; 64];
        for _ in 0..draws {
            let sample = add_noise(&x, t, &s, &mut rng).unwrap();
            sample.z_t.with_data(|z| {
                for (a, &v) in acc.iter_mut().zip(z) {
                    *a += v as f64;
                }
            });
        }
        let expected = s.alpha(t) as f64 * 0.5;
        let sigma = s.beta(t) as f64 / (draws as f64).sqrt();
        for (i, a) in acc.iter().enumerate() {
            let mean = a / draws as f64;
            assert!(
                (mean - expected).abs() < 3.0 * sigma,
                "pixel {i}: mean {mean} vs {expected} (3 sigma = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn diffusion_loss_examples() {
        let mut rng = Rng::new(8);
        let eps = Tensor::randn(&[1, 3, 3], &mut rng);
        assert_eq!(diffusion_loss(&eps, &eps).unwrap().item().unwrap(), 0.0);

        let shifted = eps.add_scalar(0.25).unwrap();
        let loss = diffusion_loss(&shifted, &eps).unwrap().item().unwrap();
        assert!((loss - 0.0625).abs() < 1e-6, "got {loss}");

        // seeded 4-element pair against a direct f64 evaluation
        let a = Tensor::from_vec(&[4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let b = Tensor::from_vec(&[4], vec![-0.1, 0.4, 0.7, 1.5]).unwrap();
        let expect: f64 = [0.4f64, -1.6, 0.0, 0.5].iter().map(|d| d * d).sum::<f64>() / 4.0;
        let loss = diffusion_loss(&a, &b).unwrap().item().unwrap();
        assert!((loss as f64 - expect).abs() < 1e-6, "got {loss}, want {expect}");
    }

    #[test]
    fn diffusion_loss_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(diffusion_loss(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn x0_hand_arithmetic() {
        // z = 1.0, eps = 0.5, alpha = 0.8, beta = 0.6 -> (1 - 0.3) / 0.8 = 0.875
        let z = Tensor::scalar(1.0);
        let e = Tensor::scalar(0.5);
        let out = invert_eps(&z, &e, 0.8, 0.6).unwrap().item().unwrap();
        assert!((out - 0.875).abs() < 1e-6, "got {out}");
    }

    #[test]
    fn x0_at_zero_returns_input() {
        let s = NoiseSchedule::cosine(16).unwrap();
        let z = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let e = Tensor::zeros(&[2]);
        let out = x0_from_eps(&z, &e, 0, &s).unwrap();
        assert_eq!(out.to_vec(), z.to_vec());
    }

    #[test]
    fn x0_rejects_vanishing_alpha() {
        let s = NoiseSchedule::from_tables(vec![1.0, 5e-7], vec![0.0, 1.0]).unwrap();
        let z = Tensor::scalar(0.5);
        let e = Tensor::scalar(0.5);
        assert!(x0_from_eps(&z, &e, 1, &s).is_err());
    }

    #[test]
    fn roundtrip_recovers_x_for_every_t() {
        let s = NoiseSchedule::cosine(256).unwrap();
        let mut rng = Rng::new(17);
        let x = Tensor::randn(&[1, 8, 8], &mut rng).clamp(-1.0, 1.0).unwrap();
        for t in 1..=256 {
            let sample = add_noise(&x, t, &s, &mut rng).unwrap();
            let back = x0_from_eps(&sample.z_t, &sample.eps, t, &s).unwrap();
            let err = max_abs_diff(&back, &x);
            assert!(err < 1e-5, "t = {t}: max error {err}");
        }
    }

    #[test]
    fn ddim_identity_when_target_equals_source() {
        let s = NoiseSchedule::cosine(64).unwrap();
        let mut rng = Rng::new(21);
        let z = Tensor::randn(&[1, 4, 4], &mut rng);
        let x0 = Tensor::randn(&[1, 4, 4], &mut rng);
        let out = ddim_step(&z, &x0, 40, 40, &s).unwrap();
        assert_eq!(out.to_vec(), z.to_vec());
    }

    #[test]
    fn ddim_preserves_noise_direction() {
        // z_t built from known eps and x0_hat = x: result is
        // alpha_prev * x + beta_prev * eps
        let s = NoiseSchedule::cosine(64).unwrap();
        let mut rng = Rng::new(22);
        let x = Tensor::randn(&[1, 4, 4], &mut rng);
        let sample = add_noise(&x, 48, &s, &mut rng).unwrap();
        let out = ddim_step(&sample.z_t, &x, 48, 20, &s).unwrap();
        let expect = x
            .mul_scalar(s.alpha(20))
            .unwrap()
            .add(&sample.eps.mul_scalar(s.beta(20)).unwrap())
            .unwrap();
        assert!(max_abs_diff(&out, &expect) < 1e-5);
    }

    #[test]
    fn ddim_two_steps_compose_to_one() {
        let s = NoiseSchedule::cosine(256).unwrap();
        let mut rng = Rng::new(23);
        let z = Tensor::randn(&[1, 6, 6], &mut rng);
        let x0 = Tensor::randn(&[1, 6, 6], &mut rng).mul_scalar(0.5).unwrap();
        for (t, mid, r) in [(256, 170, 90), (200, 128, 1), (100, 50, 0)] {
            let direct = ddim_step(&z, &x0, t, r, &s).unwrap();
            let hop = ddim_step(&ddim_step(&z, &x0, t, mid, &s).unwrap(), &x0, mid, r, &s).unwrap();
            let err = max_abs_diff(&direct, &hop);
            assert!(err < 1e-5, "composition {t}->{mid}->{r}: error {err}");
        }
    }

    #[test]
    fn ddim_hand_arithmetic() {
        // 0.9 * 0.875 + (0.436 / 0.6) * (1 - 0.8 * 0.875) = 1.0055
        let z = Tensor::scalar(1.0);
        let x0 = Tensor::scalar(0.875);
        let out = ddim_combine(&z, &x0, 0.8, 0.6, 0.9, 0.436).unwrap().item().unwrap();
        let expect = 0.9 * 0.875 + (0.436f64 / 0.6) * (1.0 - 0.8 * 0.875);
        assert!((out as f64 - expect).abs() < 1e-6, "got {out}, want {expect}");
    }

    #[test]
    fn ddim_from_noiseless_source_errors() {
        let s = NoiseSchedule::cosine(16).unwrap();
        let z = Tensor::scalar(0.1);
        let x0 = Tensor::scalar(0.1);
        assert!(ddim_step(&z, &x0, 0, 0, &s).is_err());
    }
}
