//! Checkpoint container.
//!
//! Layout: the magic string `IIRK`, a `u32` little-endian format version,
//! then repeated records until end of file. Each record is
//! `name_len: u32 LE`, UTF-8 name bytes, `rank: u32 LE`, `rank` extents as
//! `u64 LE`, then `product(extents)` payload floats as `f32 LE`.
//! Save then load reproduces every bit.
//!
//! Reserved record names carry metadata through the same encoding:
//! `__meta.phase` and `__meta.config_hash` hold string bytes as floats,
//! `__meta.step` and `__meta.noisy_previews` are scalars, and
//! `__opt.t` / `__opt.m.<param>` / `__opt.v.<param>` persist optimizer
//! state for exact training resumption.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{runtime, usage, Result};

pub const MAGIC: &[u8; 4] = b"IIRK";
pub const VERSION: u32 = 1;

/// Training phase recorded in a checkpoint; later phases require earlier
/// ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    BaseDcp,
    Previewer,
    Aggregator,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::BaseDcp => "base+dcp",
            Phase::Previewer => "previewer",
            Phase::Aggregator => "aggregator",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "base+dcp" => Ok(Phase::BaseDcp),
            "previewer" => Ok(Phase::Previewer),
            "aggregator" => Ok(Phase::Aggregator),
            other => Err(runtime(format!("unknown checkpoint phase '{other}'"))),
        }
    }
}

/// One named tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Optimizer moments for exact training resumption.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub t: u64,
    /// `(param name, first moment, second moment)` per optimized parameter.
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub phase: Phase,
    pub config_hash: String,
    pub step: usize,
    pub noisy_previews: bool,
    pub params: BTreeMap<String, Record>,
    pub opt: Option<OptState>,
}

fn string_record(name: &str, value: &str) -> Record {
    Record {
        name: name.to_string(),
        shape: vec![value.len()],
        data: value.bytes().map(|b| b as f32).collect(),
    }
}

fn record_string(rec: &Record) -> Result<String> {
    let bytes: Vec<u8> = rec.data.iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| runtime(format!("record '{}' is not a string", rec.name)))
}

impl Checkpoint {
    pub fn new(phase: Phase, config_hash: &str, step: usize) -> Checkpoint {
        Checkpoint {
            phase,
            config_hash: config_hash.to_string(),
            step,
            noisy_previews: false,
            params: BTreeMap::new(),
            opt: None,
        }
    }

    pub fn insert_params(&mut self, named: &[(String, previr_core::Tensor)]) {
        for (name, tensor) in named {
            self.params.insert(
                name.clone(),
                Record { name: name.clone(), shape: tensor.shape().to_vec(), data: tensor.to_vec() },
            );
        }
    }

    /// Copies checkpointed values into matching live tensors; every live
    /// parameter must be present with the right shape, and every stored
    /// parameter must be consumed.
    pub fn load_into(&self, named: &[(String, previr_core::Tensor)]) -> Result<()> {
        let mut used = 0usize;
        for (name, tensor) in named {
            let rec = self
                .params
                .get(name)
                .ok_or_else(|| runtime(format!("checkpoint is missing parameter '{name}'")))?;
            if rec.shape != tensor.shape() {
                return Err(runtime(format!(
                    "checkpoint parameter '{name}' has shape {:?}, expected {:?}",
                    rec.shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(&rec.data).map_err(|e| runtime(e.to_string()))?;
            used += 1;
        }
        if used != self.params.len() {
            let live: std::collections::BTreeSet<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = self
                .params
                .keys()
                .map(|s| s.as_str())
                .filter(|n| !live.contains(n))
                .collect();
            return Err(runtime(format!("checkpoint has unconsumed parameters: {extra:?}")));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let write_record = |rec: &Record, out: &mut Vec<u8>| {
            out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(rec.name.as_bytes());
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &e in &rec.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &rec.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        write_record(&string_record("__meta.phase", self.phase.name()), &mut out);
        write_record(&string_record("__meta.config_hash", &self.config_hash), &mut out);
        write_record(
            &Record { name: "__meta.step".into(), shape: vec![1], data: vec![self.step as f32] },
            &mut out,
        );
        write_record(
            &Record {
                name: "__meta.noisy_previews".into(),
                shape: vec![1],
                data: vec![if self.noisy_previews { 1.0 } else { 0.0 }],
            },
            &mut out,
        );
        for rec in self.params.values() {
            write_record(rec, &mut out);
        }
        if let Some(opt) = &self.opt {
            write_record(
                &Record { name: "__opt.t".into(), shape: vec![1], data: vec![opt.t as f32] },
                &mut out,
            );
            for (name, m, v) in &opt.moments {
                write_record(
                    &Record { name: format!("__opt.m.{name}"), shape: vec![m.len()], data: m.clone() },
                    &mut out,
                );
                write_record(
                    &Record { name: format!("__opt.v.{name}"), shape: vec![v.len()], data: v.clone() },
                    &mut out,
                );
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 || &bytes[0..4] != MAGIC {
            return Err(runtime("not a checkpoint: bad magic".to_string()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(runtime(format!("unsupported checkpoint version {version}")));
        }
        let mut pos = 8usize;
        let mut records: Vec<Record> = Vec::new();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(runtime("checkpoint truncated".to_string()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        while pos < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| runtime("record name is not UTF-8".to_string()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let payload = take(&mut pos, count * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, shape, data });
        }

        let mut phase = None;
        let mut config_hash = String::new();
        let mut step = 0usize;
        let mut noisy = false;
        let mut params = BTreeMap::new();
        let mut opt_t = None;
        let mut opt_m: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut opt_v: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for rec in records {
            if rec.name == "__meta.phase" {
                phase = Some(Phase::parse(&record_string(&rec)?)?);
            } else if rec.name == "__meta.config_hash" {
                config_hash = record_string(&rec)?;
            } else if rec.name == "__meta.step" {
                step = rec.data.first().copied().unwrap_or(0.0) as usize;
            } else if rec.name == "__meta.noisy_previews" {
                noisy = rec.data.first().copied().unwrap_or(0.0) != 0.0;
            } else if rec.name == "__opt.t" {
                opt_t = Some(rec.data.first().copied().unwrap_or(0.0) as u64);
            } else if let Some(p) = rec.name.strip_prefix("__opt.m.") {
                opt_m.insert(p.to_string(), rec.data);
            } else if let Some(p) = rec.name.strip_prefix("__opt.v.") {
                opt_v.insert(p.to_string(), rec.data);
            } else {
                params.insert(rec.name.clone(), rec);
            }
        }
        let phase = phase.ok_or_else(|| runtime("checkpoint has no phase record".to_string()))?;
        let opt = opt_t.map(|t| OptState {
            t,
            moments: opt_m
                .into_iter()
                .map(|(name, m)| {
                    let v = opt_v.get(&name).cloned().unwrap_or_default();
                    (name, m, v)
                })
                .collect(),
        });
        Ok(Checkpoint { phase, config_hash, step, noisy_previews: noisy, params, opt })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| usage(format!("cannot read checkpoint '{}': {e}", path.display())))?;
        Checkpoint::decode(&bytes)
    }

    /// Enforces the phase prerequisite chain.
    pub fn require_phase(&self, wanted: Phase) -> Result<()> {
        if self.phase < wanted {
            return Err(usage(format!(
                "checkpoint phase '{}' precedes required phase '{}': run the earlier stages first",
                self.phase.name(),
                wanted.name()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use previr_core::Tensor;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut ck = Checkpoint::new(Phase::Previewer, "abcd1234", 777);
        let t1 = Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.1, f32::MIN_POSITIVE, 1e20, -0.0]).unwrap();
        let t2 = Tensor::from_vec(&[4], vec![0.25; 4]).unwrap();
        ck.insert_params(&[("a.w".into(), t1.clone()), ("b.w".into(), t2.clone())]);
        ck.opt = Some(OptState { t: 42, moments: vec![("a.w".into(), vec![0.5, 0.5], vec![0.1, 0.2])] });
        ck.noisy_previews = true;

        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.phase, Phase::Previewer);
        assert_eq!(back.config_hash, "abcd1234");
        assert_eq!(back.step, 777);
        assert!(back.noisy_previews);
        let ra = &back.params["a.w"];
        assert_eq!(ra.shape, vec![2, 3]);
        assert_eq!(
            ra.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t1.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let opt = back.opt.unwrap();
        assert_eq!(opt.t, 42);
        assert_eq!(opt.moments[0].1, vec![0.5, 0.5]);
        // re-encoding is byte-identical
        assert_eq!(bytes, Checkpoint::decode(&ck.encode()).unwrap().encode());
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let ck = Checkpoint::new(Phase::BaseDcp, "", 0);
        let bytes = ck.encode();
        assert_eq!(&bytes[0..4], b"IIRK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let mut ck = Checkpoint::new(Phase::BaseDcp, "", 0);
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        ck.insert_params(&[("w".into(), t)]);

        let live = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        ck.load_into(&[("w".into(), live.clone())]).unwrap();
        assert_eq!(live.to_vec(), vec![1.0, 2.0]);

        let wrong_shape = Tensor::param(&[3], vec![0.0; 3]).unwrap();
        assert!(ck.load_into(&[("w".into(), wrong_shape)]).is_err());
        let wrong_name = Tensor::param(&[2], vec![0.0; 2]).unwrap();
        assert!(ck.load_into(&[("v".into(), wrong_name)]).is_err());
    }

    #[test]
    fn phase_ordering_enforced() {
        let ck = Checkpoint::new(Phase::BaseDcp, "", 0);
        assert!(ck.require_phase(Phase::BaseDcp).is_ok());
        assert!(ck.require_phase(Phase::Previewer).is_err());
        let ck2 = Checkpoint::new(Phase::Aggregator, "", 0);
        assert!(ck2.require_phase(Phase::Previewer).is_ok());
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(Checkpoint::decode(b"JUNK").is_err());
        let ck = Checkpoint::new(Phase::BaseDcp, "", 0);
        let mut bytes = ck.encode();
        bytes.truncate(bytes.len() - 2);
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
