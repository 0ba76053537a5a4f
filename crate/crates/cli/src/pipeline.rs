//! Network assembly, checkpoint wiring and parallel evaluation.

use previr_core::aggregator::AggregatorNet;
use previr_core::diffusion::NoiseSchedule;
use previr_core::nets::{ClassEmbedding, CompactEncoder, DenoiserNet};
use previr_core::sampler::RestorationNets;
use previr_core::Rng;

use crate::checkpoint::{Checkpoint, OptState, Phase};
use crate::config::RunConfig;
use crate::error::{runtime, Result};

const INIT_STREAM: u64 = 0x494E4954;

/// The assembled networks plus the schedule they were trained on.
pub struct Pipeline {
    pub nets: RestorationNets,
    pub schedule: NoiseSchedule,
}

impl Pipeline {
    /// Fresh networks for `phase`: the adapter exists from the previewer
    /// phase on, the aggregator from the aggregator phase on. Initialization
    /// is a pure function of the training seed.
    pub fn build(cfg: &RunConfig, phase: Phase) -> Result<Pipeline> {
        let net_cfg = cfg.net_config();
        let mut rng = Rng::new(cfg.train_seed).derive(INIT_STREAM);
        let mut denoiser = DenoiserNet::new(&net_cfg, &mut rng);
        let encoder = CompactEncoder::new(&net_cfg, &mut rng);
        let class_emb = ClassEmbedding::new(&net_cfg, &mut rng);
        if phase >= Phase::Previewer {
            denoiser.attach_adapter(&mut rng);
        }
        let aggregator = (phase >= Phase::Aggregator)
            .then(|| AggregatorNet::from_denoiser(&denoiser, &mut rng));
        let schedule = NoiseSchedule::cosine(cfg.train_steps)?;
        Ok(Pipeline { nets: RestorationNets { denoiser, encoder, class_emb, aggregator }, schedule })
    }

    /// Rebuilds the networks of `ckpt.phase` and loads every stored
    /// parameter into them.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Pipeline> {
        let pipeline = Pipeline::build(cfg, ckpt.phase)?;
        ckpt.load_into(&pipeline.nets.named_params())?;
        Ok(pipeline)
    }

    /// Snapshots the current parameters into a checkpoint.
    pub fn to_checkpoint(&self, phase: Phase, config_hash: &str, step: usize) -> Checkpoint {
        let mut ck = Checkpoint::new(phase, config_hash, step);
        ck.insert_params(&self.nets.named_params());
        ck
    }

    /// Attaches optimizer state for exact resumption. `named` must be the
    /// parameter list the optimizer steps, in order.
    pub fn opt_state(
        named: &[(String, previr_core::Tensor)],
        opt: &previr_core::tensor::optim::AdamW,
    ) -> OptState {
        let (m, v, t) = opt.state();
        OptState {
            t,
            moments: named
                .iter()
                .zip(m.iter().zip(v))
                .map(|((name, _), (m, v))| (name.clone(), m.clone(), v.clone()))
                .collect(),
        }
    }

    /// Restores optimizer state saved by [`Pipeline::opt_state`].
    pub fn restore_opt(
        named: &[(String, previr_core::Tensor)],
        state: &OptState,
        opt: &mut previr_core::tensor::optim::AdamW,
    ) -> Result<()> {
        let mut m = Vec::with_capacity(named.len());
        let mut v = Vec::with_capacity(named.len());
        for (name, _) in named {
            let slot = state
                .moments
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| runtime(format!("optimizer state missing for '{name}'")))?;
            m.push(slot.1.clone());
            v.push(slot.2.clone());
        }
        opt.restore_state(m, v, state.t).map_err(|e| runtime(e.to_string()))
    }
}

/// Runs `work` over indexed rows across `threads` workers, each on its own
/// pipeline rebuilt from `ckpt` with parameters frozen (evaluation needs no
/// gradients). Results come back in input order, so the outcome is
/// independent of scheduling.
pub fn parallel_rows<T: Send, R: Sync>(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    rows: &[R],
    threads: usize,
    work: impl Fn(&Pipeline, usize, &R) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.max(1).min(rows.len().max(1));
    if threads <= 1 {
        let pipeline = Pipeline::from_checkpoint(cfg, ckpt)?;
        pipeline.nets.freeze();
        return rows.iter().enumerate().map(|(i, r)| work(&pipeline, i, r)).collect();
    }
    let chunk = rows.len().div_ceil(threads);
    let results: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (c, slice) in rows.chunks(chunk).enumerate() {
            let work = &work;
            handles.push(scope.spawn(move || -> Result<Vec<T>> {
                let pipeline = Pipeline::from_checkpoint(cfg, ckpt)?;
                pipeline.nets.freeze();
                slice
                    .iter()
                    .enumerate()
                    .map(|(j, r)| work(&pipeline, c * chunk + j, r))
                    .collect()
            }));
        }
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(rows.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Worker count for evaluation fan-out.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8)
}
