//! The denoising UNet with dual cross-attention conditioning.
//!
//! Three resolution levels (full, half, quarter) with channel widths
//! `{C, 2C, 4C}`. Every level carries a residual conv block and a dual
//! cross-attention block that reads class tokens and the compact LQ
//! context. The decoder accepts per-level external residuals gated by a
//! scalar, which is how aggregator output enters the network.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use super::layers::{from_tokens, to_tokens, Attention, Conv2d, Linear, ResBlock};
use super::{sinusoidal_embedding, NetConfig, TIME_EMB_DIM};
use crate::tensor::{Error, Result, Rng, Tensor, ToggleFlag};

/// Learned per-class token sequences, with one reserved null class used for
/// classifier-free guidance dropout.
pub struct ClassEmbedding {
    pub table: Tensor,
    class_count: usize,
    token_len: usize,
    dim: usize,
}

impl ClassEmbedding {
    pub fn new(cfg: &NetConfig, rng: &mut Rng) -> ClassEmbedding {
        let rows = (cfg.class_count + 1) * cfg.class_token_len;
        let data: Vec<f32> = (0..rows * cfg.context_dim).map(|_| rng.next_normal() * 0.5).collect();
        ClassEmbedding {
            table: Tensor::param(&[rows, cfg.context_dim], data).unwrap(),
            class_count: cfg.class_count,
            token_len: cfg.class_token_len,
            dim: cfg.context_dim,
        }
    }

    /// The reserved null class id (`== class_count`).
    pub fn null_id(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Token rows for a class id; the null id is valid.
    pub fn tokens(&self, class_id: usize) -> Result<Tensor> {
        if class_id > self.class_count {
            return Err(Error::InvalidArgument {
                op: "class_embedding",
                detail: format!("class id {class_id} out of range (null id is {})", self.class_count),
            });
        }
        self.table.slice_rows(class_id * self.token_len, self.token_len)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}

/// Self-attention plus the dual conditioning residual:
/// `f + CrossAttn(f, class) + w * CrossAttn(f, lq)`.
pub struct DualCrossAttnBlock {
    pub self_attn: Attention,
    pub class_attn: Option<Attention>,
    pub lq_attn: Attention,
    pub weight_lq: f32,
}

impl DualCrossAttnBlock {
    pub fn new(dim: usize, ctx_dim: usize, weight_lq: f32, rng: &mut Rng) -> DualCrossAttnBlock {
        DualCrossAttnBlock {
            self_attn: Attention::new(dim, dim, rng),
            class_attn: Some(Attention::new(dim, ctx_dim, rng)),
            lq_attn: Attention::new(dim, ctx_dim, rng),
            weight_lq,
        }
    }

    /// The conditioning residual applied to token-space features.
    pub fn dual_cross_attn(
        &self,
        f_in: &Tensor,
        class_ctx: Option<&Tensor>,
        lq_ctx: &Tensor,
    ) -> Result<Tensor> {
        let mut out = match (&self.class_attn, class_ctx) {
            (Some(attn), Some(ctx)) => f_in.add(&attn.forward(f_in, ctx)?)?,
            _ => f_in.clone(),
        };
        let lq_term = self.lq_attn.forward(f_in, lq_ctx)?.mul_scalar(self.weight_lq)?;
        out = out.add(&lq_term)?;
        Ok(out)
    }

    /// Full block on a `[c, h, w]` map: self-attention then the dual
    /// conditioning residual.
    pub fn forward(&self, map: &Tensor, class_ctx: Option<&Tensor>, lq_ctx: &Tensor) -> Result<Tensor> {
        let [c, h, w] = [map.shape()[0], map.shape()[1], map.shape()[2]];
        let tokens = to_tokens(map)?;
        let tokens = tokens.add(&self.self_attn.forward(&tokens, &tokens)?)?;
        let tokens = self.dual_cross_attn(&tokens, class_ctx, lq_ctx)?;
        from_tokens(&tokens, c, h, w)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        if let Some(c) = &self.class_attn {
            c.collect(&format!("{prefix}.class_attn"), out);
        }
        self.lq_attn.collect(&format!("{prefix}.lq_attn"), out);
    }

    pub fn collect_lora(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.collect_lora(&format!("{prefix}.self_attn"), out);
        if let Some(c) = &self.class_attn {
            c.collect_lora(&format!("{prefix}.class_attn"), out);
        }
        self.lq_attn.collect_lora(&format!("{prefix}.lq_attn"), out);
    }

    fn attach_lora(&mut self, rank: usize, scale: f32, flag: &ToggleFlag, rng: &mut Rng) {
        self.self_attn.attach_lora(rank, scale, flag, rng);
        if let Some(c) = &mut self.class_attn {
            c.attach_lora(rank, scale, flag, rng);
        }
        self.lq_attn.attach_lora(rank, scale, flag, rng);
    }
}

/// Noise-prediction UNet.
pub struct DenoiserNet {
    pub cfg: NetConfig,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    enc1_res: ResBlock,
    enc1_attn: DualCrossAttnBlock,
    down1: Conv2d,
    enc2_res: ResBlock,
    enc2_attn: DualCrossAttnBlock,
    down2: Conv2d,
    mid_res: ResBlock,
    mid_attn: DualCrossAttnBlock,
    dec3_res: ResBlock,
    dec3_attn: DualCrossAttnBlock,
    up2: Conv2d,
    dec2_res: ResBlock,
    dec2_attn: DualCrossAttnBlock,
    up1: Conv2d,
    dec1_res: ResBlock,
    dec1_attn: DualCrossAttnBlock,
    conv_out: Conv2d,
    adapter: Option<ToggleFlag>,
}

impl DenoiserNet {
    pub fn new(cfg: &NetConfig, rng: &mut Rng) -> DenoiserNet {
        assert!(cfg.image_size % 4 == 0, "image size must be divisible by 4");
        let [c1, c2, c3] = cfg.level_channels();
        let td = cfg.time_hidden();
        let d = cfg.context_dim;
        let w = cfg.lq_attn_weight;
        DenoiserNet {
            cfg: cfg.clone(),
            time_in: Linear::new(TIME_EMB_DIM, td, true, rng),
            time_out: Linear::new(td, td, true, rng),
            conv_in: Conv2d::new(1, c1, 1, rng),
            enc1_res: ResBlock::new(c1, c1, td, rng),
            enc1_attn: DualCrossAttnBlock::new(c1, d, w[0], rng),
            down1: Conv2d::new(c1, c2, 2, rng),
            enc2_res: ResBlock::new(c2, c2, td, rng),
            enc2_attn: DualCrossAttnBlock::new(c2, d, w[1], rng),
            down2: Conv2d::new(c2, c3, 2, rng),
            mid_res: ResBlock::new(c3, c3, td, rng),
            mid_attn: DualCrossAttnBlock::new(c3, d, w[2], rng),
            dec3_res: ResBlock::new(c3, c3, td, rng),
            dec3_attn: DualCrossAttnBlock::new(c3, d, w[2], rng),
            up2: Conv2d::new(c3, c2, 1, rng),
            dec2_res: ResBlock::new(2 * c2, c2, td, rng),
            dec2_attn: DualCrossAttnBlock::new(c2, d, w[1], rng),
            up1: Conv2d::new(c2, c1, 1, rng),
            dec1_res: ResBlock::new(2 * c1, c1, td, rng),
            dec1_attn: DualCrossAttnBlock::new(c1, d, w[0], rng),
            conv_out: Conv2d::zeroed(c1, 1, 1),
            adapter: None,
        }
    }

    /// Shapes of the three decoder injection sites, full resolution first.
    pub fn residual_shapes(&self) -> [[usize; 3]; 3] {
        let [c1, c2, c3] = self.cfg.level_channels();
        let n = self.cfg.image_size;
        [[c1, n, n], [c2, n / 2, n / 2], [c3, n / 4, n / 4]]
    }

    fn time_embed(&self, t: usize) -> Result<Tensor> {
        self.time_out.forward(&self.time_in.forward(&sinusoidal_embedding(t, TIME_EMB_DIM))?.silu()?)
    }

    /// Compression path only: features at the three levels, shallow first.
    /// Shared with the aggregator's trainable copy.
    fn encode_path(
        &self,
        x: &Tensor,
        temb: &Tensor,
        class_ctx: Option<&Tensor>,
        lq_ctx: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let h = self.conv_in.forward(x)?;
        let e1 = self.enc1_attn.forward(&self.enc1_res.forward(&h, temb)?, class_ctx, lq_ctx)?;
        let e2 = self
            .enc2_attn
            .forward(&self.enc2_res.forward(&self.down1.forward(&e1)?, temb)?, class_ctx, lq_ctx)?;
        let m = self
            .mid_attn
            .forward(&self.mid_res.forward(&self.down2.forward(&e2)?, temb)?, class_ctx, lq_ctx)?;
        Ok((e1, e2, m))
    }

    fn inject(h: Tensor, residuals: Option<&[Tensor; 3]>, level: usize, delta: f32) -> Result<Tensor> {
        match residuals {
            Some(res) => {
                let r = &res[level];
                if r.shape() != h.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "denoiser_residual",
                        detail: format!(
                            "level {level}: residual {} vs features {}",
                            crate::tensor::fmt_shape(r.shape()),
                            crate::tensor::fmt_shape(h.shape())
                        ),
                    });
                }
                h.add(&r.mul_scalar(delta)?)
            }
            None => Ok(h),
        }
    }

    /// Predicts the noise component of `z_t`. `residuals`, when present,
    /// are added to the mirrored decoder features scaled by `delta`.
    pub fn forward(
        &self,
        z_t: &Tensor,
        t: usize,
        class_tokens: &Tensor,
        lq_ctx: &Tensor,
        residuals: Option<&[Tensor; 3]>,
        delta: f32,
    ) -> Result<Tensor> {
        let n = self.cfg.image_size;
        if z_t.shape() != [1, n, n] {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                detail: format!("expected [1, {n}, {n}], got {}", crate::tensor::fmt_shape(z_t.shape())),
            });
        }
        let temb = self.time_embed(t)?;
        let class_ctx = Some(class_tokens);
        let (e1, e2, m) = self.encode_path(z_t, &temb, class_ctx, lq_ctx)?;

        let h3 = self.dec3_res.forward(&m, &temb)?;
        let h3 = Self::inject(h3, residuals, 2, delta)?;
        let h3 = self.dec3_attn.forward(&h3, class_ctx, lq_ctx)?;

        let u2 = self.up2.forward(&h3.upsample_nearest2x()?)?;
        let h2 = self.dec2_res.forward(&Tensor::concat(&[&u2, &e2], 0)?, &temb)?;
        let h2 = Self::inject(h2, residuals, 1, delta)?;
        let h2 = self.dec2_attn.forward(&h2, class_ctx, lq_ctx)?;

        let u1 = self.up1.forward(&h2.upsample_nearest2x()?)?;
        let h1 = self.dec1_res.forward(&Tensor::concat(&[&u1, &e1], 0)?, &temb)?;
        let h1 = Self::inject(h1, residuals, 0, delta)?;
        let h1 = self.dec1_attn.forward(&h1, class_ctx, lq_ctx)?;

        self.conv_out.forward(&h1.silu()?)
    }

    /// Attaches a low-rank adapter to every attention projection. The
    /// adapter starts disabled.
    pub fn attach_adapter(&mut self, rng: &mut Rng) {
        let flag: ToggleFlag = Rc::new(core::cell::Cell::new(false));
        let rank = self.cfg.lora_rank;
        let scale = self.cfg.lora_scale;
        for block in [
            &mut self.enc1_attn,
            &mut self.enc2_attn,
            &mut self.mid_attn,
            &mut self.dec3_attn,
            &mut self.dec2_attn,
            &mut self.dec1_attn,
        ] {
            block.attach_lora(rank, scale, &flag, rng);
        }
        self.adapter = Some(flag);
    }

    pub fn adapter_attached(&self) -> bool {
        self.adapter.is_some()
    }

    pub fn adapter_enabled(&self) -> bool {
        self.adapter.as_ref().map(|f| f.get()).unwrap_or(false)
    }

    /// Toggles the adapter; subsequent forwards use `W + s A B` iff enabled.
    pub fn set_adapter(&self, enabled: bool) -> Result<()> {
        match &self.adapter {
            Some(flag) => {
                flag.set(enabled);
                Ok(())
            }
            None => Err(Error::InvalidArgument {
                op: "adapter_toggle",
                detail: "no adapter attached".into(),
            }),
        }
    }

    /// Runs `f` with the adapter forced to `enabled`, restoring the previous
    /// state afterwards.
    pub fn with_adapter<T>(&self, enabled: bool, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        let flag = self.adapter.as_ref().ok_or(Error::InvalidArgument {
            op: "adapter_toggle",
            detail: "no adapter attached".into(),
        })?;
        let prev = flag.get();
        flag.set(enabled);
        let out = f(self);
        flag.set(prev);
        out
    }

    fn attn_blocks(&self) -> [(&'static str, &DualCrossAttnBlock); 6] {
        [
            ("enc1_attn", &self.enc1_attn),
            ("enc2_attn", &self.enc2_attn),
            ("mid_attn", &self.mid_attn),
            ("dec3_attn", &self.dec3_attn),
            ("dec2_attn", &self.dec2_attn),
            ("dec1_attn", &self.dec1_attn),
        ]
    }

    /// Base parameters (everything except adapter matrices).
    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.time_in.collect(&format!("{prefix}.time_in"), out);
        self.time_out.collect(&format!("{prefix}.time_out"), out);
        self.conv_in.collect(&format!("{prefix}.conv_in"), out);
        self.enc1_res.collect(&format!("{prefix}.enc1_res"), out);
        self.down1.collect(&format!("{prefix}.down1"), out);
        self.enc2_res.collect(&format!("{prefix}.enc2_res"), out);
        self.down2.collect(&format!("{prefix}.down2"), out);
        self.mid_res.collect(&format!("{prefix}.mid_res"), out);
        self.dec3_res.collect(&format!("{prefix}.dec3_res"), out);
        self.up2.collect(&format!("{prefix}.up2"), out);
        self.dec2_res.collect(&format!("{prefix}.dec2_res"), out);
        self.up1.collect(&format!("{prefix}.up1"), out);
        self.dec1_res.collect(&format!("{prefix}.dec1_res"), out);
        self.conv_out.collect(&format!("{prefix}.conv_out"), out);
        for (name, block) in self.attn_blocks() {
            block.collect(&format!("{prefix}.{name}"), out);
        }
    }

    /// Adapter matrices only.
    pub fn collect_adapter_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, block) in self.attn_blocks() {
            block.collect_lora(&format!("{prefix}.{name}"), out);
        }
    }

    /// Pieces the aggregator copies: the compression path plus the time MLP.
    pub(crate) fn compression_copy(&self) -> CompressionCopy {
        CompressionCopy {
            time_in: self.time_in.clone_params(),
            time_out: self.time_out.clone_params(),
            conv_in: self.conv_in.clone_params(),
            enc1_res: self.enc1_res.clone_params(),
            enc1_self: self.enc1_attn.self_attn.clone_params(),
            down1: self.down1.clone_params(),
            enc2_res: self.enc2_res.clone_params(),
            enc2_self: self.enc2_attn.self_attn.clone_params(),
            down2: self.down2.clone_params(),
            mid_res: self.mid_res.clone_params(),
            mid_self: self.mid_attn.self_attn.clone_params(),
        }
    }
}

/// Weight copies handed to the aggregator at construction.
pub(crate) struct CompressionCopy {
    pub time_in: Linear,
    pub time_out: Linear,
    pub conv_in: Conv2d,
    pub enc1_res: ResBlock,
    pub enc1_self: Attention,
    pub down1: Conv2d,
    pub enc2_res: ResBlock,
    pub enc2_self: Attention,
    pub down2: Conv2d,
    pub mid_res: ResBlock,
    pub mid_self: Attention,
}
