//! Checkpoint layout:
//!
//! ```text
//! magic        8 bytes   "ATBCKPT1"
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON
//! data         f32 LE buffers, back to back
//! ```
//!
//! The header holds `format` (1), `dtype` ("f32le"), the model `config`, and
//! `tensors`: one `{name, shape, offset, nbytes}` entry per trainable tensor
//! in canonical order, offsets counted from the start of `data`. LSH
//! rotations are not stored; they are regenerated from the config seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATBCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    for (name, t) in state.params() {
        let offset = data.len() as u64;
        for v in t.data() {
            data.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        tensors.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
            nbytes: data.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        format: 1,
        dtype: "f32le".into(),
        config: state.config.clone(),
        tensors,
    })?;
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&data)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    if header.format != 1 || header.dtype != "f32le" {
        return Err(bad("unsupported format or dtype"));
    }
    let data = &bytes[data_start..];
    let mut state: ModelState<T> = init_model(&header.config)?;
    let names: Vec<String> = state.params().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(bad("tensor count does not match the config"));
    }
    for ((name, t), e) in names.iter().zip(state.params_mut()).zip(&header.tensors) {
        if &e.name != name || e.shape != t.shape() {
            return Err(bad(&format!("expected {name} {:?}, found {} {:?}", t.shape(), e.name, e.shape)));
        }
        let (start, len) = (e.offset as usize, e.nbytes as usize);
        if len != t.numel() * 4 || start.checked_add(len).map_or(true, |end| end > data.len()) {
            return Err(bad(&format!("buffer of {name} out of bounds")));
        }
        for (dst, chunk) in t.data_mut().iter_mut().zip(data[start..start + len].chunks_exact(4)) {
            *dst = T::lit(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
    }
    Ok(state)
}
