//! Declarative run configuration.
//!
//! Plain-text INI-style file with `[section]` headers, `key = value` lines
//! and `#` comments. Unknown sections or keys are rejected. Every field has
//! a documented default, so an empty file is a valid config. `--set
//! section.key=value` overrides individual entries after the file loads.

use std::fmt::Write as _;

use previr_core::data::DatasetConfig;
use previr_core::nets::NetConfig;
use previr_core::sampler::{SamplerConfig, SamplerMode};
use previr_core::train::TrainConfig;

use crate::error::{usage, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Training grid length T.
    pub train_steps: usize,

    // nets
    pub image_size: usize,
    pub channels: usize,
    pub context_dim: usize,
    pub context_tokens: usize,
    pub class_token_len: usize,
    pub lora_rank: usize,
    pub lora_scale: f32,
    pub lq_attn_w: [f32; 3],

    // training
    pub lr: f32,
    pub batch: usize,
    pub stage1_steps: usize,
    pub distill_steps: usize,
    pub stage2_steps: usize,
    pub lq_dropout: f32,
    pub class_dropout: f32,
    pub weight_decay: f32,
    pub train_seed: u64,
    pub log_every: usize,
    pub eval_every: usize,

    // sampler
    pub sample_steps: usize,
    pub cfg_scale: f32,
    pub eta: usize,
    pub delta_max: f32,
    pub mode: String,
    pub uncond_keeps_residuals: bool,
    pub snapshots: bool,
    pub sample_seed: u64,

    // data
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
    pub eval_count: usize,
    pub eval_seed: u64,
    pub creative_trials: usize,

    // paths
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_steps: 256,
            image_size: 24,
            channels: 32,
            context_dim: 64,
            context_tokens: 8,
            class_token_len: 4,
            lora_rank: 4,
            lora_scale: 1.0,
            lq_attn_w: [1.0; 3],
            lr: 1e-4,
            batch: 16,
            stage1_steps: 3000,
            distill_steps: 1200,
            stage2_steps: 1500,
            lq_dropout: 0.15,
            class_dropout: 0.15,
            weight_decay: 0.0,
            train_seed: 0,
            log_every: 25,
            eval_every: 200,
            sample_steps: 30,
            cfg_scale: 7.0,
            eta: 4,
            delta_max: 5.0,
            mode: "adares".into(),
            uncond_keeps_residuals: true,
            snapshots: false,
            sample_seed: 0,
            train_size: 2048,
            val_size: 128,
            test_size: 64,
            data_seed: 1,
            eval_count: 64,
            eval_seed: 2,
            creative_trials: 32,
            out_dir: "runs/default".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| usage(format!("config: cannot parse {section}.{key} = '{value}'")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(usage(format!("config: cannot parse {section}.{key} = '{value}' as bool"))),
    }
}

impl RunConfig {
    /// Parses the INI-style text on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected 'key = value'", lineno + 1)))?;
            cfg.apply(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &str) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config '{path}': {e}")))?;
        RunConfig::parse(&text)
    }

    /// Applies one `section.key=value` override.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects section.key=value, got '{spec}'")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| usage(format!("--set expects section.key=value, got '{spec}'")))?;
        self.apply(section.trim(), key.trim(), value.trim())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("schedule", "train_steps") => self.train_steps = parse_num(section, key, value)?,

            ("nets", "image_size") => self.image_size = parse_num(section, key, value)?,
            ("nets", "channels") => self.channels = parse_num(section, key, value)?,
            ("nets", "context_dim") => self.context_dim = parse_num(section, key, value)?,
            ("nets", "context_tokens") => self.context_tokens = parse_num(section, key, value)?,
            ("nets", "class_token_len") => self.class_token_len = parse_num(section, key, value)?,
            ("nets", "lora_rank") => self.lora_rank = parse_num(section, key, value)?,
            ("nets", "lora_scale") => self.lora_scale = parse_num(section, key, value)?,
            ("nets", "lq_attn_w1") => self.lq_attn_w[0] = parse_num(section, key, value)?,
            ("nets", "lq_attn_w2") => self.lq_attn_w[1] = parse_num(section, key, value)?,
            ("nets", "lq_attn_w3") => self.lq_attn_w[2] = parse_num(section, key, value)?,

            ("training", "lr") => self.lr = parse_num(section, key, value)?,
            ("training", "batch") => self.batch = parse_num(section, key, value)?,
            ("training", "stage1_steps") => self.stage1_steps = parse_num(section, key, value)?,
            ("training", "distill_steps") => self.distill_steps = parse_num(section, key, value)?,
            ("training", "stage2_steps") => self.stage2_steps = parse_num(section, key, value)?,
            ("training", "lq_dropout") => self.lq_dropout = parse_num(section, key, value)?,
            ("training", "class_dropout") => self.class_dropout = parse_num(section, key, value)?,
            ("training", "weight_decay") => self.weight_decay = parse_num(section, key, value)?,
            ("training", "seed") => self.train_seed = parse_num(section, key, value)?,
            ("training", "log_every") => self.log_every = parse_num(section, key, value)?,
            ("training", "eval_every") => self.eval_every = parse_num(section, key, value)?,

            ("sampler", "steps") => self.sample_steps = parse_num(section, key, value)?,
            ("sampler", "cfg_scale") => self.cfg_scale = parse_num(section, key, value)?,
            ("sampler", "eta") => self.eta = parse_num(section, key, value)?,
            ("sampler", "delta_max") => self.delta_max = parse_num(section, key, value)?,
            ("sampler", "mode") => {
                SamplerMode::parse(value).map_err(|e| usage(format!("config: {e}")))?;
                self.mode = value.to_string();
            }
            ("sampler", "uncond_keeps_residuals") => {
                self.uncond_keeps_residuals = parse_bool(section, key, value)?
            }
            ("sampler", "snapshots") => self.snapshots = parse_bool(section, key, value)?,
            ("sampler", "seed") => self.sample_seed = parse_num(section, key, value)?,

            ("data", "train_size") => self.train_size = parse_num(section, key, value)?,
            ("data", "val_size") => self.val_size = parse_num(section, key, value)?,
            ("data", "test_size") => self.test_size = parse_num(section, key, value)?,
            ("data", "seed") => self.data_seed = parse_num(section, key, value)?,
            ("data", "eval_count") => self.eval_count = parse_num(section, key, value)?,
            ("data", "eval_seed") => self.eval_seed = parse_num(section, key, value)?,
            ("data", "creative_trials") => self.creative_trials = parse_num(section, key, value)?,

            ("paths", "out_dir") => self.out_dir = value.to_string(),

            _ => return Err(usage(format!("config: unknown key '{section}.{key}'"))),
        }
        Ok(())
    }

    /// Canonical dump covering every field; the config hash is computed
    /// over this text.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "schedule.train_steps={}\n\
             nets.image_size={} nets.channels={} nets.context_dim={} nets.context_tokens={} \
             nets.class_token_len={} nets.lora_rank={} nets.lora_scale={} \
             nets.lq_attn_w={},{},{}\n\
             training.lr={} training.batch={} training.stage1_steps={} training.distill_steps={} \
             training.stage2_steps={} training.lq_dropout={} training.class_dropout={} \
             training.weight_decay={} training.seed={} training.log_every={} training.eval_every={}\n\
             sampler.steps={} sampler.cfg_scale={} sampler.eta={} sampler.delta_max={} \
             sampler.mode={} sampler.uncond_keeps_residuals={} sampler.snapshots={} sampler.seed={}\n\
             data.train_size={} data.val_size={} data.test_size={} data.seed={} data.eval_count={} \
             data.eval_seed={} data.creative_trials={}\n\
             paths.out_dir={}",
            self.train_steps,
            self.image_size,
            self.channels,
            self.context_dim,
            self.context_tokens,
            self.class_token_len,
            self.lora_rank,
            self.lora_scale,
            self.lq_attn_w[0],
            self.lq_attn_w[1],
            self.lq_attn_w[2],
            self.lr,
            self.batch,
            self.stage1_steps,
            self.distill_steps,
            self.stage2_steps,
            self.lq_dropout,
            self.class_dropout,
            self.weight_decay,
            self.train_seed,
            self.log_every,
            self.eval_every,
            self.sample_steps,
            self.cfg_scale,
            self.eta,
            self.delta_max,
            self.mode,
            self.uncond_keeps_residuals,
            self.snapshots,
            self.sample_seed,
            self.train_size,
            self.val_size,
            self.test_size,
            self.data_seed,
            self.eval_count,
            self.eval_seed,
            self.creative_trials,
            self.out_dir,
        );
        s
    }

    /// FNV-1a hash of the canonical dump, as hex.
    pub fn hash_hex(&self) -> String {
        let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
        for b in self.canonical().as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{hash:016x}")
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            image_size: self.image_size,
            base_channels: self.channels,
            context_dim: self.context_dim,
            context_tokens: self.context_tokens,
            class_count: previr_core::data::NUM_CLASSES,
            class_token_len: self.class_token_len,
            lora_rank: self.lora_rank,
            lora_scale: self.lora_scale,
            lq_attn_weight: self.lq_attn_w,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            batch_size: self.batch,
            lq_dropout: self.lq_dropout,
            class_dropout: self.class_dropout,
            seed: self.train_seed,
        }
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            steps: self.sample_steps,
            cfg_scale: self.cfg_scale,
            eta_cutoff: self.eta,
            mode: SamplerMode::parse(&self.mode).map_err(|e| usage(e.to_string()))?,
            creative: None,
            delta_max: self.delta_max,
            seed: self.sample_seed,
            snapshots: self.snapshots,
            uncond_keeps_residuals: self.uncond_keeps_residuals,
            delta_override: None,
        })
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
            seed: self.data_seed,
        }
    }
}
