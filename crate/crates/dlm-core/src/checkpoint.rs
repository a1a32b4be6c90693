//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes, b"DLM1"
//! version          u32
//! meta_len         u64
//! meta             meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! tensor_count     u64
//! per tensor:
//!   name_len       u64
//!   name           name_len bytes of UTF-8
//!   rank           u64 (always 2)
//!   dims           rank x u64 (rows, cols)
//!   values         rows*cols x f32, row-major
//! ```
//!
//! Values round-trip bitwise (NaN payloads and signed zeros included).
//! Readers refuse unknown versions outright rather than guessing.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::model::{ModelConfig, ModelParams};
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DLM1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume work with the tensors: the architecture,
/// optionally the training recipe that produced them, and optionally the
/// tokenizer so generation tools are self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
}

pub fn write_checkpoint_bytes(meta: &CheckpointMeta, params: &ModelParams<f32>) -> Result<Vec<u8>> {
    if meta.model != params.config {
        return Err(Error::checkpoint("meta model config disagrees with the parameters"));
    }
    let meta_json = serde_json::to_string(meta)?;
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(meta_json.as_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u64.to_le_bytes());
        out.extend_from_slice(&(tensor.rows as u64).to_le_bytes());
        out.extend_from_slice(&(tensor.cols as u64).to_le_bytes());
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::checkpoint(format!(
                    "truncated: wanted {n} bytes for {what} at offset {}",
                    self.pos
                ))
            })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .map_err(|_| Error::checkpoint(format!("{what} = {v} overflows this platform")))
    }
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<(CheckpointMeta, ModelParams<f32>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint(format!(
            "bad magic {magic:02x?}; not a model checkpoint"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "format version {version} not supported (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.usize("meta length")?;
    let meta_bytes = r.take(meta_len, "meta")?;
    let meta_str = std::str::from_utf8(meta_bytes)
        .map_err(|e| Error::checkpoint(format!("meta is not UTF-8: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_str)?;

    // Allocate the right shapes from the config, then fill by name so the
    // record order in the file never matters.
    let mut params = ModelParams::<f32>::init(&meta.model, 0)?;
    let mut slots: std::collections::HashMap<String, &mut Tensor<f32>> =
        params.tensors_mut().into_iter().collect();
    let expected = slots.len();

    let count = r.usize("tensor count")?;
    if count != expected {
        return Err(Error::checkpoint(format!(
            "{count} tensors in file, architecture has {expected}"
        )));
    }
    for _ in 0..count {
        let name_len = r.usize("name length")?;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| Error::checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let rank = r.u64("rank")?;
        if rank != 2 {
            return Err(Error::checkpoint(format!("tensor {name:?} has rank {rank}, want 2")));
        }
        let rows = r.usize("rows")?;
        let cols = r.usize("cols")?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::checkpoint(format!("tensor {name:?} dims overflow")))?;
        let raw = r.take(n * 4, "values")?;
        let tensor = slots
            .remove(name)
            .ok_or_else(|| Error::checkpoint(format!("unknown or duplicate tensor {name:?}")))?;
        if tensor.rows != rows || tensor.cols != cols {
            return Err(Error::checkpoint(format!(
                "tensor {name:?} is {rows}x{cols}, architecture wants {}x{}",
                tensor.rows, tensor.cols
            )));
        }
        for (dst, chunk) in tensor.data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if let Some(missing) = slots.keys().next() {
        return Err(Error::checkpoint(format!("file is missing tensor {missing:?}")));
    }
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((meta, params))
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ModelParams<f32>,
) -> Result<()> {
    let bytes = write_checkpoint_bytes(meta, params)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ModelParams<f32>)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint_bytes(&bytes)
}
