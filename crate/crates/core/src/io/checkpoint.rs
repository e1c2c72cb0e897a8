//! Checkpoint container.
//!
//! Layout: magic `DPI1` | u64 tensor count | per tensor (u64 name length,
//! name bytes, u64 rank, u64 extent per dimension, f32 data row-major) |
//! u64 metadata length | metadata (UTF-8 JSON). The metadata block carries
//! the model configuration and normalization statistics so a checkpoint is
//! loadable without the experiment config that produced it.

use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::{Error, Result};

use super::{push_f32, push_u64, ByteReader};

const MAGIC: &[u8; 4] = b"DPI1";
const MAX_TENSORS: usize = 1 << 16;
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 26;
const MAX_META: usize = 1 << 24;

pub fn write_checkpoint_bytes(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let meta_str = serde_json::to_string(meta)
        .map_err(|e| Error::Format(format!("metadata encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u64(&mut out, store.len() as u64);
    for (name, t) in store.iter() {
        push_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        push_u64(&mut out, t.shape.len() as u64);
        for &e in &t.shape {
            push_u64(&mut out, e as u64);
        }
        for &v in &t.data {
            push_f32(&mut out, v);
        }
    }
    push_u64(&mut out, meta_str.len() as u64);
    out.extend_from_slice(meta_str.as_bytes());
    Ok(out)
}

/// Parse checkpoint bytes into named tensors plus metadata. Never panics on
/// malformed input.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let count = r.len_capped(MAX_TENSORS, 1, "tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = r.len_capped(MAX_NAME, 1, "name length")?;
        let name = std::str::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.len_capped(MAX_RANK, 8, "rank")?;
        let mut shape = Vec::with_capacity(rank);
        let mut elements = 1usize;
        for _ in 0..rank {
            let e = r.u64("extent")?;
            if e > MAX_ELEMENTS as u64 {
                return Err(Error::Format(format!("tensor {name:?}: extent {e} too large")));
            }
            elements = elements
                .checked_mul(e as usize)
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: too many elements")))?;
            shape.push(e as usize);
        }
        let data = r.f32_vec(elements, "tensor data")?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let meta_len = r.len_capped(MAX_META, 1, "metadata length")?;
    let meta_bytes = r.bytes(meta_len, "metadata")?;
    let meta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Format(format!("metadata decode: {e}")))?;
    if !r.is_done() {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok((tensors, meta))
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &serde_json::Value,
) -> Result<()> {
    let bytes = write_checkpoint_bytes(store, meta)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = std::fs::read(path)?;
    let (tensors, meta) = decode_checkpoint(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        store.insert(&name, t)?;
    }
    Ok((store, meta))
}
