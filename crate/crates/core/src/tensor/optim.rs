//! Parameter update rules: plain SGD and AdamW.
//!
//! Optimizers read accumulated gradients from the parameter tensors and
//! update their buffers in place. A missing gradient counts as zero, so
//! frozen branches do not need special handling at the call site.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{all_finite, Error, Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Plain stochastic gradient descent, kept around for tests and baselines.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f32,
}

impl Sgd {
    pub fn step(&self, params: &[Tensor]) -> Result<()> {
        for p in params {
            if let Some(g) = p.grad() {
                let lr = self.lr;
                p.update_data(|data| {
                    for (d, gv) in data.iter_mut().zip(&g) {
                        *d -= lr * gv;
                    }
                });
                p.with_data(|d| if all_finite(d) { Ok(()) } else { Err(Error::NonFinite { op: "sgd" }) })?;
            }
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay. One `(m, v)` slot per parameter,
/// allocated at construction; the parameter list passed to [`AdamW::step`]
/// must match it exactly.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], cfg: AdamWConfig) -> AdamW {
        AdamW {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moment buffers, exposed for checkpointing.
    pub fn state(&self) -> (&[Vec<f32>], &[Vec<f32>], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore_state(&mut self, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, t: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::InvalidArgument {
                op: "adamw",
                detail: format!("state has {} slots, optimizer expects {}", m.len(), self.m.len()),
            });
        }
        for (a, b) in m.iter().zip(&self.m) {
            if a.len() != b.len() {
                return Err(Error::InvalidArgument { op: "adamw", detail: "state slot size mismatch".into() });
            }
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument {
                op: "adamw",
                detail: format!("got {} params, state has {} slots", params.len(), self.m.len()),
            });
        }
        self.t += 1;
        let c = self.cfg;
        let bias1 = 1.0 - libm::powf(c.beta1, self.t as f32);
        let bias2 = 1.0 - libm::powf(c.beta2, self.t as f32);
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::InvalidArgument {
                    op: "adamw",
                    detail: format!("param {i} has {} elements, slot has {}", p.numel(), self.m[i].len()),
                });
            }
            let grad = p.grad();
            let g = grad.as_deref().unwrap_or(&[]);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for (j, d) in data.iter_mut().enumerate() {
                    let gv = if g.is_empty() { 0.0 } else { g[j] };
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
                    let mhat = m[j] / bias1;
                    let vhat = v[j] / bias2;
                    *d -= c.lr * c.weight_decay * *d;
                    *d -= c.lr * mhat / (libm::sqrtf(vhat) + c.eps);
                }
            });
            p.with_data(|d| if all_finite(d) { Ok(()) } else { Err(Error::NonFinite { op: "adamw" }) })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        p.set_data(&[0.0]).unwrap();
        let loss_grad = vec![1.0];
        p.zero_grad();
        // emulate a backward pass: d loss / d p = 1
        let x = p.mul_scalar(1.0).unwrap().sum().unwrap();
        x.backward().unwrap();
        assert_eq!(p.grad().unwrap(), loss_grad);
        Sgd { lr: 0.1 }.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![-0.1]);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(&[p.clone()], AdamWConfig::default());
        opt.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adamw_hand_evaluated_single_step() {
        // p = 1, g = 1, lr = 1e-4, betas (0.9, 0.999), eps 1e-8, wd 0:
        // m_hat = 1, v_hat = 1, update = lr -> p ~ 0.9999
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let loss = p.sum().unwrap();
        loss.backward().unwrap();
        let mut opt = AdamW::new(&[p.clone()], AdamWConfig::default());
        opt.step(&[p.clone()]).unwrap();
        let got = p.to_vec()[0];
        assert!((got - 0.9999).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn adamw_count_mismatch_errors() {
        let a = Tensor::param(&[1], vec![0.0]).unwrap();
        let b = Tensor::param(&[1], vec![0.0]).unwrap();
        let mut opt = AdamW::new(&[a.clone()], AdamWConfig::default());
        assert!(opt.step(&[a, b]).is_err());
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.1, lr: 0.5, ..AdamWConfig::default() };
        let mut opt = AdamW::new(&[p.clone()], cfg);
        opt.step(&[p.clone()]).unwrap();
        assert!((p.to_vec()[0] - 0.95).abs() < 1e-6);
    }
}
