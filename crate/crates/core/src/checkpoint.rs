//! Checkpoint archive.
//!
//! ```text
//! b"UQCKPT\0\0"   magic
//! u32 LE          format version
//! u64 LE          header length
//! header          JSON (configs, counters, tensor table, memory provenance)
//! payload         f64 LE: parameters, optimiser moments, memory embeddings
//! ```
//!
//! Values are stored as f64 so 32-bit training state round-trips exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::memory::{MemoryBank, MemorySnapshot, Provenance};
use crate::segmenter::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"UQCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
    tensors: Vec<TensorEntry>,
    first_moment: bool,
    second_moment: bool,
    memory: MemoryHeader,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryHeader {
    capacity: usize,
    dim: usize,
    inserted: u64,
    provenance: Vec<Provenance>,
}

pub fn save_checkpoint<T: Float>(
    path: &Path,
    state: &TrainState<T>,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<()> {
    let p = &state.params;
    let mem = state.memory.snapshot(&Default::default());
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        model: model.clone(),
        train: train.clone(),
        step: state.step,
        epoch: state.epoch,
        batch_in_epoch: state.batch_in_epoch,
        tensors: p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        first_moment: !state.first_moment.is_empty(),
        second_moment: !state.second_moment.is_empty(),
        memory: MemoryHeader {
            capacity: state.memory.capacity(),
            dim: state.memory.dim(),
            inserted: state.memory.inserted(),
            provenance: mem.provenance.clone(),
        },
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |vals: &[T]| {
        for v in vals {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    };
    for t in p.tensors() {
        put(t.data());
    }
    for m in state.first_moment.iter().chain(&state.second_moment) {
        put(m);
    }
    put(&mem.embeddings);
    // write-then-rename so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::integrity(self.path, "file is truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn values<T: Float>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::integrity(self.path, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(TrainState<T>, SavedConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::integrity(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::integrity(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::integrity(path, format!("bad header: {e}")))?;
    let bad = |e: Error| Error::integrity(path, e.to_string());

    let mut named = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let data = r.values::<T>(t.shape.iter().product())?;
        named.push((
            t.name.clone(),
            Tensor::from_vec(&t.shape, data).map_err(bad)?,
        ));
    }
    let params = ModelParams::from_named(&header.model, named).map_err(bad)?;
    let lens: Vec<usize> = params.tensors().iter().map(Tensor::len).collect();
    let mut moment = |present: bool| -> Result<Vec<Vec<T>>> {
        if !present {
            return Ok(Vec::new());
        }
        lens.iter().map(|&n| r.values::<T>(n)).collect()
    };
    let first_moment = moment(header.first_moment)?;
    let second_moment = moment(header.second_moment)?;
    let m = &header.memory;
    let embeddings = r.values::<T>(m.provenance.len() * m.dim)?;
    if r.pos != bytes.len() {
        return Err(Error::integrity(path, "trailing bytes after payload"));
    }
    let snapshot = MemorySnapshot {
        embeddings,
        dim: m.dim,
        provenance: m.provenance.clone(),
    };
    let memory = MemoryBank::from_parts(m.capacity, snapshot, m.inserted).map_err(bad)?;
    let state = TrainState {
        params,
        first_moment,
        second_moment,
        memory,
        step: header.step,
        epoch: header.epoch,
        batch_in_epoch: header.batch_in_epoch,
    };
    Ok((
        state,
        SavedConfig {
            model: header.model,
            train: header.train,
        },
    ))
}
