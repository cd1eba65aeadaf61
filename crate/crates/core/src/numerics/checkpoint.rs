//! Binary checkpoints of a [`ParameterStore`].
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes   "TABRETCK"
//! version      u32       currently 1
//! meta_len     u32       length of the metadata block
//! metadata     meta_len  UTF-8 `key=value\n` lines, keys sorted
//! n_params     u32
//! n_params times:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rows       u32
//!   cols       u32
//!   step       u64       Adam update count
//!   value      rows*cols f64, row-major
//!   m          rows*cols f64, Adam first moment
//!   v          rows*cols f64, Adam second moment
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::params::{Parameter, ParameterStore};
use super::tape::Matrix;

pub const MAGIC: &[u8; 8] = b"TABRETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint contains invalid UTF-8")]
    Utf8,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Metadata = BTreeMap<String, String>;

pub fn encode(store: &ParameterStore, meta: &Metadata) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.scalar_count() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let (r, c) = p.value.dim();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&p.step.to_le_bytes());
        for m in [&p.value, &p.m, &p.v] {
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(CheckpointError::Truncated(self.bytes.len())),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, CheckpointError> {
        let raw = self.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("sized above"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParameterStore, Metadata), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION });
    }
    let meta_len = r.u32()? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| CheckpointError::Utf8)?;
    let mut meta = Metadata::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let n = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Utf8)?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let step = r.u64()?;
        let value = r.matrix(rows, cols)?;
        let m = r.matrix(rows, cols)?;
        let v = r.matrix(rows, cols)?;
        store
            .push(Parameter { name, value, m, v, step })
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing byte(s)",
            bytes.len() - r.pos
        )));
    }
    Ok((store, meta))
}

pub fn save(path: &Path, store: &ParameterStore, meta: &Metadata) -> Result<(), CheckpointError> {
    fs::write(path, encode(store, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterStore, Metadata), CheckpointError> {
    decode(&fs::read(path)?)
}
