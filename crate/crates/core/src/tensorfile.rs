//! `CTF1` tensor container.
//!
//! Layout: `b"CTF1"` | header length (u64 LE) | UTF-8 JSON header | payload.
//! The header maps each name to `{dtype, shape, offset, length}` with keys in
//! sorted order; offsets are relative to the payload start and entries are
//! stored contiguously in name order. When the container is non-empty the
//! header is padded with spaces so the payload begins on an 8-byte boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CTF1";
const PREFIX_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("tensor {name:?}: shape {shape:?} does not match {len} values")]
    ShapeMismatch { name: String, shape: Vec<usize>, len: usize },
    #[error("missing tensor {0:?}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, TensorFileError>;

/// An f32 tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Self { shape, data: data.iter().map(|&v| v as f32).collect() }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

/// Named tensors, iterated in sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    entries: BTreeMap<String, Tensor>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.is_ascii()
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut file = Self::new();
        for (name, tensor) in entries {
            file.insert(name, tensor)?;
        }
        Ok(file)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if !valid_name(&name) {
            return Err(TensorFileError::InvalidName(name));
        }
        if tensor.numel() != tensor.data.len() {
            return Err(TensorFileError::ShapeMismatch { name, shape: tensor.shape, len: tensor.data.len() });
        }
        if self.entries.contains_key(&name) {
            return Err(TensorFileError::DuplicateName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| TensorFileError::Missing(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.entries {
            let length = t.data.len() * 4;
            header.insert(
                name.clone(),
                HeaderEntry { dtype: "f32".into(), shape: t.shape.clone(), offset, length },
            );
            offset += length;
        }
        let mut header_json = serde_json::to_string(&header).expect("header serializes");
        if !self.entries.is_empty() {
            while !(PREFIX_LEN + header_json.len()).is_multiple_of(8) {
                header_json.push(' ');
            }
        }
        let mut out = Vec::with_capacity(PREFIX_LEN + header_json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(header_json.as_bytes());
        for t in self.entries.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(TensorFileError::BadMagic);
        }
        if bytes.len() < PREFIX_LEN {
            return Err(TensorFileError::CorruptHeader("missing header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| TensorFileError::CorruptHeader("header length exceeds file".into()))?;
        let text = std::str::from_utf8(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| TensorFileError::CorruptHeader(e.to_string()))?;
        let header: BTreeMap<String, HeaderEntry> =
            serde_json::from_str(text).map_err(|e| TensorFileError::CorruptHeader(e.to_string()))?;

        let payload = &bytes[header_end..];
        let mut expected_offset = 0usize;
        let mut entries = BTreeMap::new();
        for (name, h) in header {
            if !valid_name(&name) {
                return Err(TensorFileError::InvalidName(name));
            }
            if h.dtype != "f32" {
                return Err(TensorFileError::UnknownDtype(h.dtype));
            }
            let numel = h.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(4)) != Some(h.length) {
                return Err(TensorFileError::CorruptHeader(format!(
                    "{name}: length {} inconsistent with shape {:?}",
                    h.length, h.shape
                )));
            }
            if h.offset != expected_offset {
                return Err(TensorFileError::CorruptHeader(format!(
                    "{name}: offset {} but expected {expected_offset}",
                    h.offset
                )));
            }
            expected_offset += h.length;
            if expected_offset > payload.len() {
                return Err(TensorFileError::TruncatedPayload { expected: expected_offset, found: payload.len() });
            }
            let data = payload[h.offset..expected_offset]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.insert(name, Tensor { shape: h.shape, data });
        }
        if expected_offset != payload.len() {
            return Err(TensorFileError::CorruptHeader(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(Self { entries })
    }
}

pub fn write_tensorfile(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    fs::write(path, file.to_bytes())?;
    Ok(())
}

pub fn read_tensorfile(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::from_bytes(&fs::read(path)?)
}
