//! Named-tensor binary container (`.fta`).
//!
//! Layout: the four magic bytes `FTA1`, a little-endian `u64` header length,
//! that many bytes of UTF-8 JSON, then the raw little-endian payload. The
//! header lists every tensor with its dtype, shape and byte offset relative to
//! the payload start:
//!
//! ```json
//! {"tensors":[{"name":"conv1.weight","dtype":"f32","shape":[64,3,7,7],"offset":0}],
//!  "metadata":{"kind":"resnet18"}}
//! ```
//!
//! Offsets must not overlap and the payload must be exactly as long as the
//! sum of the tensor sizes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::array::{Array, Scalar};

pub const MAGIC: &[u8; 4] = b"FTA1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic bytes (expected FTA1)")]
    BadMagic,
    #[error("truncated archive: {0}")]
    Truncated(String),
    #[error("overlapping tensor offsets: `{0}` and `{1}`")]
    Overlap(String, String),
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("archive i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I64(_) => Dtype::I64,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveTensor {
    pub fn f32(shape: &[usize], data: Vec<f32>) -> Self {
        ArchiveTensor {
            shape: shape.to_vec(),
            data: TensorData::F32(data),
        }
    }

    pub fn f64(shape: &[usize], data: Vec<f64>) -> Self {
        ArchiveTensor {
            shape: shape.to_vec(),
            data: TensorData::F64(data),
        }
    }

    pub fn i64(shape: &[usize], data: Vec<i64>) -> Self {
        ArchiveTensor {
            shape: shape.to_vec(),
            data: TensorData::I64(data),
        }
    }

    pub fn from_array<T: Scalar>(a: &Array<T>) -> Self {
        if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f64>() {
            ArchiveTensor::f64(a.shape(), a.data().iter().map(|v| v.as_f64()).collect())
        } else {
            ArchiveTensor::f32(a.shape(), a.data().iter().map(|v| v.as_f64() as f32).collect())
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    /// Values converted to `T` regardless of stored dtype.
    pub fn to_array<T: Scalar>(&self) -> Array<T> {
        let data: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            TensorData::I64(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
        };
        Array::from_vec(&self.shape, data).expect("archive tensor shape is validated")
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_i64_vec(&self) -> Vec<i64> {
        match &self.data {
            TensorData::I64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as i64).collect(),
            TensorData::F64(v) => v.iter().map(|&x| x as i64).collect(),
        }
    }

    fn byte_len(&self) -> usize {
        self.data.len() * self.dtype().size()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: IndexMap<String, ArchiveTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(HeaderEntry {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.byte_len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            metadata: self.metadata.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            t.data.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(ArchiveError::Truncated("missing header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let header_end = 12u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| {
                ArchiveError::Truncated(format!(
                    "header length {} exceeds file size {}",
                    header_len,
                    bytes.len()
                ))
            })? as usize;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| ArchiveError::Format(format!("header json: {e}")))?;
        let payload = &bytes[header_end..];

        let mut seen = HashSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        let mut total = 0u64;
        for e in &header.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(ArchiveError::Format(format!("duplicate tensor name `{}`", e.name)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| ArchiveError::Format(format!("shape overflow for `{}`", e.name)))?;
            let size = count * e.dtype.size() as u64;
            spans.push((e.offset, e.offset + size, e.name.as_str()));
            total += size;
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(ArchiveError::Overlap(w[0].2.to_string(), w[1].2.to_string()));
            }
        }
        if let Some(&(_, end, name)) = spans.iter().max_by_key(|s| s.1) {
            if end > payload.len() as u64 {
                return Err(ArchiveError::Truncated(format!(
                    "tensor `{}` ends at byte {} but payload has {}",
                    name,
                    end,
                    payload.len()
                )));
            }
        }
        if total != payload.len() as u64 {
            return Err(ArchiveError::Format(format!(
                "payload length {} does not equal the sum of tensor sizes {}",
                payload.len(),
                total
            )));
        }

        let mut tensors = IndexMap::with_capacity(header.tensors.len());
        for e in header.tensors {
            let size = e.shape.iter().product::<usize>() * e.dtype.size();
            let start = e.offset as usize;
            let data = TensorData::read_le(e.dtype, &payload[start..start + size]);
            tensors.insert(e.name, ArchiveTensor { shape: e.shape, data });
        }
        Ok(TensorArchive {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn save_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, archive.to_bytes())?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<TensorArchive, ArchiveError> {
    TensorArchive::from_bytes(&fs::read(path)?)
}
