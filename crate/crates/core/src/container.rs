//! The checkpoint and dataset file format: a little-endian binary container
//! of named f32 tensors.
//!
//! Layout: magic `XRID`, format version (u32), entry count (u32); then per
//! entry a u16 name length, the UTF-8 name, a dtype byte (0 = f32), a rank
//! byte, the dims as u32s, and the raw little-endian payload. Everything is
//! fixed-width and fully specified so any language can read it; round-trips
//! are bitwise exact.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"XRID";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
/// Refuse to allocate more than this many elements for one entry when
/// reading; guards against corrupt or hostile headers.
const MAX_NUMEL: u64 = 1 << 28;

/// An ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default)]
pub struct TensorContainer {
    entries: Vec<(String, Tensor)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        TensorContainer::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(CoreError::Container(format!(
                "entry name must be 1..=65535 bytes, got {}",
                name.len()
            )));
        }
        if self.get(name).is_some() {
            return Err(CoreError::Container(format!("duplicate entry name {name:?}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`get`](Self::get) but failing loudly, for required entries.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| CoreError::Container(format!("container has no entry {name:?}")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32, tensor.rank() as u8])?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |msg: String| CoreError::Container(msg);
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = read_u32(r, "version")?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = read_u32(r, "entry count")?;
        let mut out = TensorContainer::new();
        let mut seen = BTreeSet::new();
        for i in 0..count {
            let name_len = read_u16(r, "name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes, "name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| bad(format!("entry {i} name is not UTF-8")))?;
            if !seen.insert(name.clone()) {
                return Err(bad(format!("duplicate entry name {name:?}")));
            }
            let mut meta = [0u8; 2];
            read_exact(r, &mut meta, "dtype/rank")?;
            if meta[0] != DTYPE_F32 {
                return Err(bad(format!("entry {name:?} has unknown dtype {}", meta[0])));
            }
            let rank = meta[1] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r, "dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .unwrap_or(u64::MAX);
            if numel > MAX_NUMEL {
                return Err(bad(format!(
                    "entry {name:?} claims {numel} elements, refusing to allocate"
                )));
            }
            let mut payload = vec![0u8; numel as usize * 4];
            read_exact(r, &mut payload, "payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            out.entries.push((name, Tensor::from_vec(shape, data)?));
        }
        let mut trailer = [0u8; 1];
        if r.read(&mut trailer).map_err(|e| bad(format!("read failed: {e}")))? != 0 {
            return Err(bad("trailing bytes after final entry".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| CoreError::io(path, e))?;
        w.flush().map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// Encodes index lists (labels, views) as a rank-1 f32 tensor. f32 holds
/// integers exactly below 2^24, which bounds the identity count this
/// format can carry.
pub fn indices_to_tensor(vals: &[usize]) -> Result<Tensor> {
    if let Some(&big) = vals.iter().find(|&&v| v >= (1usize << 24)) {
        return Err(CoreError::Container(format!(
            "index {big} exceeds the exact f32 range"
        )));
    }
    Tensor::from_vec(vec![vals.len()], vals.iter().map(|&v| v as f32).collect())
}

/// Inverse of [`indices_to_tensor`]; `what` names the entry in errors.
pub fn tensor_to_indices(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < (1u32 << 24) as f32 {
                Ok(v as usize)
            } else {
                Err(CoreError::Container(format!("{what} entry {v} is not an index")))
            }
        })
        .collect()
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| CoreError::Container(format!("truncated while reading {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}
