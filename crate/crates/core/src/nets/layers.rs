//! Layer primitives shared by the networks: convolutions, linears with an
//! optional low-rank adapter, attention and residual conv blocks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{Error, Result, Rng, Tensor, ToggleFlag};

fn randn_vec(n: usize, std: f32, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| rng.next_normal() * std).collect()
}

pub(crate) fn push_param(out: &mut Vec<(String, Tensor)>, prefix: &str, name: &str, t: &Tensor) {
    out.push((format!("{prefix}.{name}"), t.clone()));
}

/// 3x3 convolution layer (reflect padding, stride 1 or 2).
#[derive(Clone)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Conv2d {
        let std = libm::sqrtf(2.0 / (cin * 9) as f32);
        Conv2d {
            w: Tensor::param(&[cout, cin, 3, 3], randn_vec(cout * cin * 9, std, rng)).unwrap(),
            b: Tensor::param(&[cout], alloc::vec![0.0; cout]).unwrap(),
            stride,
        }
    }

    /// Zero-initialized variant for residual branch outputs.
    pub fn zeroed(cin: usize, cout: usize, stride: usize) -> Conv2d {
        Conv2d {
            w: Tensor::param(&[cout, cin, 3, 3], alloc::vec![0.0; cout * cin * 9]).unwrap(),
            b: Tensor::param(&[cout], alloc::vec![0.0; cout]).unwrap(),
            stride,
        }
    }

    /// A fresh layer carrying copies of this layer's weights.
    pub fn clone_params(&self) -> Conv2d {
        Conv2d {
            w: Tensor::param(self.w.shape(), self.w.to_vec()).unwrap(),
            b: Tensor::param(self.b.shape(), self.b.to_vec()).unwrap(),
            stride: self.stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, &self.b, self.stride)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        push_param(out, prefix, "w", &self.w);
        push_param(out, prefix, "b", &self.b);
    }
}

/// Additive low-rank delta on a linear weight: `W + scale * A B`.
#[derive(Clone)]
pub struct Lora {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f32,
    enabled: ToggleFlag,
}

/// Dense layer with optional bias and optional low-rank adapter.
#[derive(Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub lora: Option<Lora>,
}

impl Linear {
    pub fn new(din: usize, dout: usize, bias: bool, rng: &mut Rng) -> Linear {
        let std = libm::sqrtf(1.0 / din as f32);
        Linear {
            w: Tensor::param(&[din, dout], randn_vec(din * dout, std, rng)).unwrap(),
            b: bias.then(|| Tensor::param(&[dout], alloc::vec![0.0; dout]).unwrap()),
            lora: None,
        }
    }

    pub fn zeroed(din: usize, dout: usize, bias: bool) -> Linear {
        Linear {
            w: Tensor::param(&[din, dout], alloc::vec![0.0; din * dout]).unwrap(),
            b: bias.then(|| Tensor::param(&[dout], alloc::vec![0.0; dout]).unwrap()),
            lora: None,
        }
    }

    pub fn clone_params(&self) -> Linear {
        Linear {
            w: Tensor::param(self.w.shape(), self.w.to_vec()).unwrap(),
            b: self.b.as_ref().map(|b| Tensor::param(b.shape(), b.to_vec()).unwrap()),
            lora: None,
        }
    }

    /// Attaches a low-rank adapter controlled by the shared `flag`.
    /// `A` is small random, `B` starts at zero, so the enabled path is
    /// exactly the base layer until training moves `B`.
    pub fn attach_lora(&mut self, rank: usize, scale: f32, flag: ToggleFlag, rng: &mut Rng) {
        let [din, dout] = [self.w.shape()[0], self.w.shape()[1]];
        self.lora = Some(Lora {
            a: Tensor::param(&[din, rank], randn_vec(din * rank, 0.1, rng)).unwrap(),
            b: Tensor::param(&[rank, dout], alloc::vec![0.0; rank * dout]).unwrap(),
            scale,
            enabled: flag,
        });
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.w)?;
        if let Some(b) = &self.b {
            y = y.add_rows(b)?;
        }
        if let Some(lora) = &self.lora {
            if lora.enabled.get() {
                let delta = x.matmul(&lora.a)?.matmul(&lora.b)?.mul_scalar(lora.scale)?;
                y = y.add(&delta)?;
            }
        }
        Ok(y)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        push_param(out, prefix, "w", &self.w);
        if let Some(b) = &self.b {
            push_param(out, prefix, "b", b);
        }
    }

    pub fn collect_lora(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(l) = &self.lora {
            push_param(out, prefix, "lora_a", &l.a);
            push_param(out, prefix, "lora_b", &l.b);
        }
    }
}

/// Single-head scaled-dot-product attention with learned projections.
/// The query input is layer-normalized inside; keys and values read the
/// context as-is.
#[derive(Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new(dim: usize, ctx_dim: usize, rng: &mut Rng) -> Attention {
        Attention {
            q: Linear::new(dim, dim, false, rng),
            k: Linear::new(ctx_dim, dim, false, rng),
            v: Linear::new(ctx_dim, dim, false, rng),
            o: Linear::new(dim, dim, false, rng),
        }
    }

    pub fn clone_params(&self) -> Attention {
        Attention {
            q: self.q.clone_params(),
            k: self.k.clone_params(),
            v: self.v.clone_params(),
            o: self.o.clone_params(),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(&x.layer_norm(1e-5)?)?;
        let k = self.k.forward(ctx)?;
        let v = self.v.forward(ctx)?;
        self.o.forward(&Tensor::attention(&q, &k, &v)?)
    }

    pub fn attach_lora(&mut self, rank: usize, scale: f32, flag: &ToggleFlag, rng: &mut Rng) {
        for lin in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            lin.attach_lora(rank, scale, flag.clone(), rng);
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.collect(&format!("{prefix}.q"), out);
        self.k.collect(&format!("{prefix}.k"), out);
        self.v.collect(&format!("{prefix}.v"), out);
        self.o.collect(&format!("{prefix}.o"), out);
    }

    pub fn collect_lora(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.collect_lora(&format!("{prefix}.q"), out);
        self.k.collect_lora(&format!("{prefix}.k"), out);
        self.v.collect_lora(&format!("{prefix}.v"), out);
        self.o.collect_lora(&format!("{prefix}.o"), out);
    }
}

/// Residual conv block with additive time modulation. The second conv is
/// zero-initialized so a fresh block is the identity (plus skip projection).
#[derive(Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub temb: Linear,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, time_dim: usize, rng: &mut Rng) -> ResBlock {
        ResBlock {
            conv1: Conv2d::new(cin, cout, 1, rng),
            conv2: Conv2d::zeroed(cout, cout, 1),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, rng)),
            temb: Linear::new(time_dim, cout, true, rng),
        }
    }

    pub fn clone_params(&self) -> ResBlock {
        ResBlock {
            conv1: self.conv1.clone_params(),
            conv2: self.conv2.clone_params(),
            skip: self.skip.as_ref().map(|s| s.clone_params()),
            temb: self.temb.clone_params(),
        }
    }

    /// `x` is `[cin, h, w]`, `temb` is the `[1, time_dim]` embedding.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let mut h = self.conv1.forward(x)?;
        let shift = self.temb.forward(temb)?.reshape(&[self.conv1.w.shape()[0]])?;
        h = h.add_channels(&shift)?;
        h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        if let Some(s) = &self.skip {
            s.collect(&format!("{prefix}.skip"), out);
        }
        self.temb.collect(&format!("{prefix}.temb"), out);
    }
}

/// `[c, h, w]` feature map to `[h*w, c]` tokens.
pub fn to_tokens(map: &Tensor) -> Result<Tensor> {
    match map.shape() {
        [c, h, w] => map.reshape(&[*c, h * w])?.transpose2d(),
        s => Err(Error::ShapeMismatch {
            op: "to_tokens",
            detail: format!("expected rank 3, got {}", crate::tensor::fmt_shape(s)),
        }),
    }
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
    tokens.transpose2d()?.reshape(&[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_roundtrip() {
        let mut rng = Rng::new(1);
        let map = Tensor::randn(&[3, 4, 5], &mut rng);
        let back = from_tokens(&to_tokens(&map).unwrap(), 3, 4, 5).unwrap();
        assert_eq!(back.to_vec(), map.to_vec());
    }

    #[test]
    fn fresh_resblock_is_identity_plus_time_bias() {
        // conv2 is zeroed, so the residual branch contributes nothing
        let mut rng = Rng::new(2);
        let block = ResBlock::new(3, 3, 8, &mut rng);
        let x = Tensor::randn(&[3, 4, 4], &mut rng);
        let temb = Tensor::zeros(&[1, 8]);
        let y = block.forward(&x, &temb).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn lora_disabled_and_zero_b_match_base() {
        let mut rng = Rng::new(3);
        let mut lin = Linear::new(4, 4, false, &mut rng);
        let x = Tensor::randn(&[2, 4], &mut rng);
        let base = lin.forward(&x).unwrap();
        let flag: ToggleFlag = alloc::rc::Rc::new(core::cell::Cell::new(false));
        lin.attach_lora(2, 1.0, flag.clone(), &mut rng);
        assert_eq!(lin.forward(&x).unwrap().to_vec(), base.to_vec());
        flag.set(true);
        // B starts at zero: enabled output is still bit-identical
        assert_eq!(lin.forward(&x).unwrap().to_vec(), base.to_vec());
    }

    #[test]
    fn lora_hand_computed_delta() {
        // r = 1, A = [[1], [0]], B = [[0, 1]]: delta = [[0,1],[0,0]]
        let mut rng = Rng::new(4);
        let mut lin = Linear::new(2, 2, false, &mut rng);
        let flag: ToggleFlag = alloc::rc::Rc::new(core::cell::Cell::new(true));
        lin.attach_lora(1, 1.0, flag, &mut rng);
        let lora = lin.lora.as_mut().unwrap();
        lora.a.set_data(&[1.0, 0.0]).unwrap();
        lora.b.set_data(&[0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2], alloc::vec![1.0, 0.0]).unwrap();
        let with = lin.forward(&x).unwrap().to_vec();
        let base = x.matmul(&lin.w).unwrap().to_vec();
        // effective W saw [[0,1],[0,0]] added: row 0 output gains (0, 1)
        assert!((with[0] - base[0]).abs() < 1e-6);
        assert!((with[1] - (base[1] + 1.0)).abs() < 1e-6);
    }
}
