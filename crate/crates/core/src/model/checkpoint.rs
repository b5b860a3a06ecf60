//! Checkpoint container: `SPKC0001`, u32 LE entry count, then per entry a
//! u16 LE name length, the UTF-8 name and one SPKT tensor.
//!
//! Entries are the model parameters under their own names, `meta.*` scalars
//! describing the architecture, `adam.m.*`/`adam.v.*`/`adam.t.*` optimizer
//! moments and `train.*` scalars owned by the trainer.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::io::{encode_tensor, Reader};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPKC0001";

pub fn encode_entries(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_entries(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.fail("bad checkpoint magic (expected SPKC0001)"));
    }
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("entry name is not UTF-8"))?
            .to_owned();
        let t = r.tensor()?;
        entries.push((name, t));
    }
    if !r.at_end() {
        return Err(r.fail("trailing bytes after last entry"));
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_entries(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_entries(&bytes, path)
}

/// Everything a checkpoint holds, split by role.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// `train.*` scalars without the prefix.
    pub train: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn train_value(&self, key: &str) -> Option<f64> {
        self.train.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Rebuilds the network described by the stored metadata.
    pub fn model(&self) -> Result<Model> {
        let mut scratch = ParamStore::new();
        Model::new(self.config, &mut scratch, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

pub fn checkpoint_entries(config: &ModelConfig, store: &ParamStore, train: &[(String, f64)]) -> Vec<(String, Tensor)> {
    let mut entries: Vec<(String, Tensor)> = config
        .to_meta()
        .into_iter()
        .map(|(k, v)| (k, Tensor::scalar(v)))
        .collect();
    for p in store.iter() {
        entries.push((p.name.clone(), p.value.clone()));
    }
    for p in store.iter() {
        entries.push((format!("adam.m.{}", p.name), p.first_moment.clone()));
        entries.push((format!("adam.v.{}", p.name), p.second_moment.clone()));
        entries.push((format!("adam.t.{}", p.name), Tensor::scalar(p.steps as f64)));
    }
    for (k, v) in train {
        entries.push((format!("train.{k}"), Tensor::scalar(*v)));
    }
    entries
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, store: &ParamStore, train: &[(String, f64)]) -> Result<()> {
    write_entries(path, &checkpoint_entries(config, store, train))
}

/// Parses a checkpoint and restores parameters and optimizer state into a
/// store laid out exactly as a freshly built model's.
pub fn parse_checkpoint(entries: Vec<(String, Tensor)>, path: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let scalar = |k: &str| {
        entries
            .iter()
            .find(|(n, _)| n == k)
            .and_then(|(_, t)| (t.len() == 1).then(|| t.data()[0]))
    };
    let config = ModelConfig::from_meta(scalar).map_err(|e| fail(e.to_string()))?;
    let mut store = ParamStore::new();
    Model::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| fail(e.to_string()))?;

    let mut train = Vec::new();
    let mut seen = vec![false; store.len()];
    for (name, t) in entries {
        if name.starts_with("meta.") {
            continue;
        }
        if let Some(k) = name.strip_prefix("train.") {
            if t.len() != 1 {
                return Err(fail(format!("{name} must be a scalar")));
            }
            train.push((k.to_owned(), t.data()[0]));
            continue;
        }
        let (field, pname) = match name.strip_prefix("adam.") {
            Some(rest) => match rest.split_once('.') {
                Some((f @ ("m" | "v" | "t"), p)) => (f, p),
                _ => return Err(fail(format!("unknown optimizer entry {name}"))),
            },
            None => ("value", name.as_str()),
        };
        let id = store
            .find(pname)
            .ok_or_else(|| fail(format!("entry {name} matches no parameter of this architecture")))?;
        let p = store.get_mut(id);
        if field == "t" {
            if t.len() != 1 {
                return Err(fail(format!("{name} must be a scalar")));
            }
            p.steps = t.item() as u64;
            continue;
        }
        if t.shape() != p.value.shape() {
            return Err(fail(format!(
                "{name} has shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        match field {
            "m" => p.first_moment = t,
            "v" => p.second_moment = t,
            _ => {
                p.value = t;
                seen[id.0] = true;
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &store.iter().nth(i).expect("index in range").name;
        return Err(fail(format!("missing parameter {name}")));
    }
    Ok(Checkpoint { config, store, train })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(read_entries(path)?, path)
}
