//! Checkpoint container.
//!
//! Layout (little-endian): magic `STCK`, u32 version, u32-prefixed config
//! fingerprint, u64 step, u64 Adam step, RNG state (32-byte seed, u64 stream,
//! u128 word position), u32 block count, then blocks of u32-prefixed name,
//! u32 rank, u32 dims, u64 element count and f64 values. A SHA-256 of all
//! preceding bytes closes the file.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::optim::Adam;
use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::tasks::{Model, ModelConfig};
use crate::Scalar;

pub const MAGIC: [u8; 4] = *b"STCK";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of the canonical TOML rendering of the model configuration.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let text = toml::to_string(cfg).expect("model config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Everything a training run needs to continue bit-exactly.
#[derive(Clone, Debug)]
pub struct ModelState<S> {
    pub model: Model<S>,
    pub adam: Adam<S>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub fingerprint: String,
}

impl<S: Scalar> ModelState<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::new(cfg, seed)?;
        let adam = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Ok(Self {
            model,
            adam,
            step: 0,
            rng,
            fingerprint: config_fingerprint(cfg),
        })
    }

    /// Zeroes optimizer moments and the step counter, keeping the weights.
    pub fn reset_optimizer(&mut self) {
        self.adam = Adam::new(&self.model.params);
        self.step = 0;
    }
}

/// A parsed checkpoint not yet bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub fingerprint: String,
    pub step: u64,
    pub adam_t: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub blocks: Vec<(String, Vec<usize>, Vec<f64>)>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

impl CheckpointData {
    pub fn from_state<S: Scalar>(state: &ModelState<S>) -> Self {
        let p = &state.model.params;
        let mut blocks = Vec::new();
        for id in p.ids() {
            let t = p.get(id);
            blocks.push((format!("{PARAM}{}", p.name(id)), t.shape().to_vec(), t.to_f64()));
        }
        for (prefix, moments) in [(MOMENT1, &state.adam.m), (MOMENT2, &state.adam.v)] {
            for id in p.ids() {
                let m = &moments[id.index()];
                blocks.push((
                    format!("{prefix}{}", p.name(id)),
                    p.get(id).shape().to_vec(),
                    m.iter().map(|x| x.as_f64()).collect(),
                ));
            }
        }
        Self {
            fingerprint: state.fingerprint.clone(),
            step: state.step,
            adam_t: state.adam.t,
            rng_seed: state.rng.get_seed(),
            rng_stream: state.rng.get_stream(),
            rng_word_pos: state.rng.get_word_pos(),
            blocks,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.fingerprint);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.adam_t.to_le_bytes());
        b.extend_from_slice(&self.rng_seed);
        b.extend_from_slice(&self.rng_stream.to_le_bytes());
        b.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        b.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.blocks {
            put_str(&mut b, name);
            b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            b.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for x in data {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[..4] != MAGIC {
            return Err(Error::Parse("not a checkpoint file".into()));
        }
        if bytes.len() < 8 + 32 {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Parse("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint = r.string()?;
        let step = r.u64()?;
        let adam_t = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = r.u64()? as usize;
            if count != shape.iter().product::<usize>() {
                return Err(Error::Parse(format!("block {name}: {count} values for shape {shape:?}")));
            }
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Parse("block too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push((name, shape, data));
        }
        if r.pos != body.len() {
            return Err(Error::Parse("trailing bytes after checkpoint blocks".into()));
        }
        Ok(Self {
            fingerprint,
            step,
            adam_t,
            rng_seed,
            rng_stream,
            rng_word_pos,
            blocks,
        })
    }

    fn block(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.blocks
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// The parameter blocks alone, as a named store.
    pub fn param_store<S: Scalar>(&self) -> Result<ParamStore<S>> {
        let mut store = ParamStore::new();
        for (name, shape, data) in &self.blocks {
            if let Some(n) = name.strip_prefix(PARAM) {
                if store.id(n).is_some() {
                    return Err(Error::Parse(format!("duplicate block {name}")));
                }
                store.add(n, Tensor::from_f64(shape, data)?);
            }
        }
        Ok(store)
    }

    pub fn check_fingerprint(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = config_fingerprint(cfg);
        if expected != self.fingerprint {
            return Err(Error::Fingerprint {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Rebuilds the full training state for `cfg`; every parameter and
    /// moment must be present with the expected shape.
    pub fn into_state<S: Scalar>(&self, cfg: &ModelConfig) -> Result<ModelState<S>> {
        self.check_fingerprint(cfg)?;
        let mut state = ModelState::<S>::new(cfg, 0)?;
        let ids: Vec<_> = state.model.params.ids().collect();
        for id in ids {
            let name = state.model.params.name(id).to_string();
            let shape = state.model.params.get(id).shape().to_vec();
            let fetch = |prefix: &str| -> Result<Vec<S>> {
                let key = format!("{prefix}{name}");
                let (s, d) = self
                    .block(&key)
                    .ok_or_else(|| Error::Parse(format!("checkpoint lacks block {key}")))?;
                if s != shape.as_slice() {
                    return Err(Error::Parse(format!("block {key} has shape {s:?}, expected {shape:?}")));
                }
                Ok(d.iter().map(|&x| S::lit(x)).collect())
            };
            let values = fetch(PARAM)?;
            state.adam.m[id.index()] = fetch(MOMENT1)?;
            state.adam.v[id.index()] = fetch(MOMENT2)?;
            state.model.params.set(id, Tensor::new(shape.clone(), values)?)?;
        }
        state.step = self.step;
        state.adam.t = self.adam_t;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        state.rng = rng;
        Ok(state)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse("checkpoint truncated".into()))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse("name is not UTF-8".into()))
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint<S: Scalar>(state: &ModelState<S>, path: &Path) -> Result<()> {
    let bytes = CheckpointData::from_state(state).encode();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CheckpointData::decode(&bytes)
}

pub fn load_checkpoint<S: Scalar>(path: &Path, cfg: &ModelConfig) -> Result<ModelState<S>> {
    read_checkpoint(path)?.into_state(cfg)
}
