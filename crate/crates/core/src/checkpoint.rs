//! Binary container for parameter records.
//!
//! Layout (all integers little-endian):
//! `"GGAN"`, `u32` version, `u32` metadata length, metadata JSON, `u32`
//! record count, then per record `u32` name length, UTF-8 name, `u32` rank,
//! `u64` per dimension, and `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::trainer::{Mode, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"GGAN";
pub const VERSION: u32 = 1;

/// One named float32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<i64>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        let data: Vec<f32> = Vec::try_from(&t.detach().to_kind(Kind::Float).flatten(0, -1)).expect("float tensor");
        Record {
            name: name.to_string(),
            shape: t.size(),
            data,
        }
    }

    pub fn to_tensor(&self, kind: Kind) -> Tensor {
        Tensor::from_slice(&self.data).to_kind(kind).reshape(self.shape.as_slice())
    }
}

/// Metadata document plus records.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub records: Vec<Record>,
}

impl Container {
    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported format version {version}")));
        }
        let meta_len = cur.u32()? as usize;
        let meta = serde_json::from_slice(cur.take(meta_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let count = cur.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("record name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            if rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("record `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as i64);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("record `{name}` has an invalid shape")))?;
            let raw = cur
                .take(numel.checked_mul(4).unwrap_or(usize::MAX))
                .map_err(|_| Error::CorruptCheckpoint(format!("truncated inside record `{name}`")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - cur.pos
            )));
        }
        Ok(Container { meta, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("file truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct NoiseMeta {
    seed: u64,
    resolution: usize,
    octaves: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct CheckpointMeta {
    kind: String,
    mode: Mode,
    config: TrainConfig,
    noise: NoiseMeta,
    iteration: u64,
    adam_g_steps: u64,
    adam_d_steps: u64,
    rng: RngMeta,
}

fn param_records(store: &ParamStore, out: &mut Vec<Record>) {
    for (name, t) in store.iter() {
        out.push(Record::from_tensor(name, t));
    }
}

fn moment_records(tag: &str, adam: &Adam, out: &mut Vec<Record>) {
    for (name, m, v) in adam.moments() {
        out.push(Record::from_tensor(&format!("adam.{tag}.m.{name}"), m));
        out.push(Record::from_tensor(&format!("adam.{tag}.v.{name}"), v));
    }
}

/// Serializes the full training state.
pub fn checkpoint_container(state: &TrainState) -> Container {
    let bank = &state.model.bank;
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        mode: state.config.mode,
        config: state.config.clone(),
        noise: NoiseMeta {
            seed: bank.seed(),
            resolution: bank.resolution(),
            octaves: bank.octaves(),
        },
        iteration: state.iteration,
        adam_g_steps: state.opt_g.steps(),
        adam_d_steps: state.opt_d.steps(),
        rng: RngMeta {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
    };
    let mut records = Vec::new();
    param_records(&state.model.generator_params, &mut records);
    param_records(&state.model.critic_params, &mut records);
    moment_records("g", &state.opt_g, &mut records);
    moment_records("d", &state.opt_d, &mut records);
    Container {
        meta: serde_json::to_value(meta).expect("metadata serializes"),
        records,
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    checkpoint_container(state).write(path)
}

/// Loads a checkpoint, rejecting it if `expected` is given and differs from
/// the stored mode.
pub fn load_checkpoint(path: &Path, expected: Option<Mode>) -> Result<TrainState> {
    restore_checkpoint(&Container::read(path)?, expected)
}

pub fn restore_checkpoint(container: &Container, expected: Option<Mode>) -> Result<TrainState> {
    let kind = container.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if kind != "checkpoint" {
        return Err(Error::CorruptCheckpoint(format!("expected a checkpoint, found a `{kind}` file")));
    }
    let meta: CheckpointMeta = serde_json::from_value(container.meta.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    if let Some(m) = expected {
        if m != meta.mode {
            return Err(Error::ModeMismatch {
                expected: m.to_string(),
                found: meta.mode.to_string(),
            });
        }
    }
    let config = meta.config.clone();
    if config.mode != meta.mode
        || config.noise_seed() != meta.noise.seed
        || config.noise_resolution != meta.noise.resolution
        || config.octaves() != meta.noise.octaves
    {
        return Err(Error::CorruptCheckpoint(
            "stored configuration disagrees with the noise and mode metadata".into(),
        ));
    }
    config.validate()?;
    let mut state = TrainState::new(config)?;

    let mut seen = std::collections::HashSet::new();
    for r in &container.records {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::Record {
                name: r.name.clone(),
                reason: "duplicate record".into(),
            });
        }
        if let Some(rest) = r.name.strip_prefix("adam.") {
            let (tag, rest) = rest.split_once('.').unwrap_or(("", ""));
            let (which, param) = rest.split_once('.').unwrap_or(("", ""));
            let (store, opt) = match tag {
                "g" => (&state.model.generator_params, &mut state.opt_g),
                "d" => (&state.model.critic_params, &mut state.opt_d),
                _ => {
                    return Err(Error::Record {
                        name: r.name.clone(),
                        reason: "unknown optimizer tag".into(),
                    })
                }
            };
            let Some(p) = store.get(param) else {
                return Err(Error::Record {
                    name: r.name.clone(),
                    reason: "moment for an unknown parameter".into(),
                });
            };
            if p.size() != r.shape {
                return Err(Error::Record {
                    name: r.name.clone(),
                    reason: format!("shape {:?} does not match parameter shape {:?}", r.shape, p.size()),
                });
            }
            let t = r.to_tensor(store.kind());
            let (m, v) = opt
                .moments()
                .find(|(n, _, _)| *n == param)
                .map(|(_, m, v)| (m.shallow_clone(), v.shallow_clone()))
                .unwrap_or_else(|| (p.zeros_like(), p.zeros_like()));
            match which {
                "m" => opt.set_moment(param, t, v),
                "v" => opt.set_moment(param, m, t),
                _ => {
                    return Err(Error::Record {
                        name: r.name.clone(),
                        reason: "unknown moment kind".into(),
                    })
                }
            }
        } else if state.model.generator_params.contains(&r.name) {
            state.model.generator_params.assign(&r.name, &r.shape, &r.data)?;
        } else if state.model.critic_params.contains(&r.name) {
            state.model.critic_params.assign(&r.name, &r.shape, &r.data)?;
        } else {
            return Err(Error::Record {
                name: r.name.clone(),
                reason: format!("not a parameter of a {} model", meta.mode),
            });
        }
    }
    for name in state
        .model
        .generator_params
        .names()
        .into_iter()
        .chain(state.model.critic_params.names())
    {
        if !seen.contains(name.as_str()) {
            return Err(Error::Record {
                name,
                reason: "missing from checkpoint".into(),
            });
        }
    }

    state.iteration = meta.iteration;
    state.opt_g.set_steps(meta.adam_g_steps);
    state.opt_d.set_steps(meta.adam_d_steps);
    let seed: [u8; 32] = hex::decode(&meta.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::CorruptCheckpoint("bad rng seed".into()))?;
    let word_pos: u128 = meta
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::CorruptCheckpoint("bad rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(state)
}
