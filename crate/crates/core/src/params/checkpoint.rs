//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MDMC"                      magic, 4 bytes
//! u32 version                 = 1
//! u32 layer_count
//! per layer (header):
//!     u32 name_len, name bytes (UTF-8)
//!     u8  dtype               0 = f32, 1 = f64
//!     u8  rank
//!     u64 dims[rank]
//! per layer (data, header order):
//!     element_count * sizeof(dtype) raw bytes
//! u32 metadata_count
//! per metadata entry:
//!     u32 key_len, key bytes, u32 value_len, value bytes
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! Layers and metadata are written in lexicographic key order so that a
//! save/load/save cycle is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{MdmError, Result};
use crate::fsutil;
use crate::hash::fnv1a;
use crate::params::layout::element_count;

pub const MAGIC: &[u8; 4] = b"MDMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(MdmError::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A named tensor. Values are always held as `f64`; `dtype` records the
/// on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape)
            .ok_or_else(|| MdmError::Format(format!("layer `{name}` element count overflows")))?;
        if expected != data.len() {
            return Err(MdmError::ShapeMismatch {
                layer: name.to_string(),
                expected,
                found: data.len(),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn f64(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, DType::F64, shape, data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| MdmError::Format(format!("checkpoint lacks metadata key `{key}`")))
    }

    /// Rejects any NaN or infinity, naming the first offending layer.
    pub fn validate_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(MdmError::NonFinite {
                    layer: name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "layer count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            out.push(t.dtype.code());
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| MdmError::Format(format!("layer `{name}` rank exceeds 255")))?;
            out.push(rank);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.tensors.values() {
            match t.dtype {
                DType::F32 => {
                    for &v in &t.data {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in &t.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out.extend_from_slice(&len_u32(self.metadata.len(), "metadata count")?.to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        let h = fnv1a(&out);
        out.extend_from_slice(&h.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(MdmError::Truncated("file shorter than magic".into()));
        }
        if &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(MdmError::BadMagic { found });
        }
        let mut r = Reader {
            buf: bytes,
            pos: 4,
        };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(MdmError::UnsupportedVersion(version));
        }
        let count = r.u32("layer count")? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("layer name")?;
            let dtype = DType::from_code(r.u8("dtype")?)?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dimension")?;
                shape.push(usize::try_from(d).map_err(|_| {
                    MdmError::Format(format!("layer `{name}` dimension {d} too large"))
                })?);
            }
            headers.push((name, dtype, shape));
        }
        let mut tensors = BTreeMap::new();
        for (name, dtype, shape) in headers {
            let n = element_count(&shape).ok_or_else(|| {
                MdmError::Format(format!("layer `{name}` element count overflows"))
            })?;
            let nbytes = n
                .checked_mul(dtype.width())
                .ok_or_else(|| MdmError::Format(format!("layer `{name}` too large")))?;
            let raw = r.take(nbytes, &format!("data of layer `{name}`"))?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let tensor = Tensor::new(&name, dtype, shape, data)?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(MdmError::Format(format!("duplicate layer `{name}`")));
            }
        }
        let meta_count = r.u32("metadata count")? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..meta_count {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.insert(k, v);
        }
        let body_end = r.pos;
        let stored = r.u64("trailing hash")?;
        if r.pos != bytes.len() {
            return Err(MdmError::Format(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let computed = fnv1a(&bytes[..body_end]);
        if stored != computed {
            return Err(MdmError::HashMismatch { stored, computed });
        }
        let ckpt = Checkpoint { tensors, metadata };
        ckpt.validate_finite()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fsutil::read(path)?)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| MdmError::Format(format!("{what} {n} exceeds u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len(), "string length")?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
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
                MdmError::Truncated(format!("{what}: need {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| MdmError::Format(format!("{what} is not valid UTF-8")))
    }
}
