//! Named-tensor checkpoints: a little-endian binary blob plus a JSON index.
//!
//! `save(path)` writes the blob to `path` and the index to `path` with
//! `.json` appended. The index lists `{name, shape, dtype, offset}` for every
//! tensor (byte offsets into the blob) and carries free-form metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    #[serde(default)]
    pub buffer: bool,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub tensors: Vec<IndexEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// In-memory checkpoint. Values are held in `f64`, which represents every
/// `f32` exactly, so save/load preserves bits in either precision.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<(IndexEntry, Tensor<f64>)>,
    pub meta: serde_json::Value,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            entries: Vec::new(),
            meta,
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, meta: serde_json::Value) -> Self {
        let mut ck = Checkpoint::new(meta);
        for p in store.iter() {
            ck.push(&p.name, &p.value, p.kind == ParamKind::Buffer, p.trainable);
        }
        ck
    }

    pub fn push<T: Real>(&mut self, name: &str, value: &Tensor<T>, buffer: bool, trainable: bool) {
        self.entries.push((
            IndexEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset: 0,
                buffer,
                trainable,
            },
            value.cast(),
        ));
    }

    pub fn get(&self, name: &str) -> Option<&(IndexEntry, Tensor<f64>)> {
        self.entries.iter().find(|(e, _)| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(e, _)| e.name.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut index = CheckpointIndex {
            tensors: Vec::with_capacity(self.entries.len()),
            meta: self.meta.clone(),
        };
        for (entry, t) in &self.entries {
            let mut e = entry.clone();
            e.offset = blob.len();
            match e.dtype.as_str() {
                "f32" => t
                    .data()
                    .iter()
                    .for_each(|&v| (v as f32).write_le(&mut blob)),
                "f64" => t.data().iter().for_each(|&v| v.write_le(&mut blob)),
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
            }
            index.tensors.push(e);
        }
        fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
        let ipath = index_path(path);
        let json = serde_json::to_string_pretty(&index)?;
        fs::write(&ipath, json).map_err(|e| Error::io(&ipath, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ipath = index_path(path);
        let json = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let index: CheckpointIndex =
            serde_json::from_str(&json).map_err(|e| Error::format(&ipath, e.to_string()))?;
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::with_capacity(index.tensors.len());
        for e in index.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::format(path, format!("unsupported dtype {other}"))),
            };
            let end = e.offset + n * width;
            if end > blob.len() {
                return Err(Error::format(
                    path,
                    format!("tensor {} extends past the end of the blob", e.name),
                ));
            }
            let bytes = &blob[e.offset..end];
            let data: Vec<f64> = if width == 4 {
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::read_le(c) as f64)
                    .collect()
            } else {
                bytes.chunks_exact(8).map(f64::read_le).collect()
            };
            let t = Tensor::from_vec(&e.shape, data)?;
            entries.push((e, t));
        }
        Ok(Checkpoint {
            entries,
            meta: index.meta,
        })
    }

    /// Copies every tensor present in both the checkpoint and `store`.
    /// Checkpoint keys unknown to the store, or shape mismatches, reject the
    /// whole load and list the offending keys. Returns the names copied.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (e, t) in &self.entries {
            match store.id(&e.name) {
                None => bad.push(format!("{} (not in model)", e.name)),
                Some(id) if store.value(id).shape() != t.shape() => bad.push(format!(
                    "{} (checkpoint {:?}, model {:?})",
                    e.name,
                    t.shape(),
                    store.value(id).shape()
                )),
                Some(_) => {}
            }
        }
        if !bad.is_empty() {
            return Err(Error::Checkpoint(format!(
                "incompatible keys: {}",
                bad.join(", ")
            )));
        }
        let mut copied = Vec::new();
        for (e, t) in &self.entries {
            store.set(&e.name, t.cast())?;
            copied.push(e.name.clone());
        }
        Ok(copied)
    }
}
