//! Versioned named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "D2TSTORE"
//! version  u32      1
//! count    u64
//! per tensor:
//!   name_len u32, name UTF-8 bytes
//!   rank     u32, dims u64 × rank
//!   dtype    u8  (0 = f64, 1 = f32)
//!   values   product(dims) × (8 | 4) bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};

pub const MAGIC: &[u8; 8] = b"D2TSTORE";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            _ => Err(NnError::Checkpoint(format!("unknown dtype tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    shape: Vec<usize>,
    dtype: DType,
    values: Vec<f64>,
}

impl StoredTensor {
    /// Values for an `F32` tensor are rounded to single precision on entry.
    pub fn new(shape: Vec<usize>, dtype: DType, mut values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(NnError::Checkpoint(format!(
                "shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        if dtype == DType::F32 {
            values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Ok(StoredTensor {
            shape,
            dtype,
            values,
        })
    }

    pub fn scalar(v: f64) -> Self {
        StoredTensor {
            shape: vec![1],
            dtype: DType::F64,
            values: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Insertion-ordered map from names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensorStore {
    entries: Vec<(String, StoredTensor)>,
}

impl NamedTensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(NnError::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.get(name)
            .and_then(|t| t.values().first().copied())
            .ok_or_else(|| NnError::Checkpoint(format!("missing scalar `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.push(t.dtype.tag());
            match t.dtype {
                DType::F64 => t
                    .values
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t
                    .values
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = read_u64(&mut r)?;
        let mut store = NamedTensorStore::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| NnError::Checkpoint(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            let dtype = DType::from_tag(tag[0])?;
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(match dtype {
                    DType::F64 => {
                        let mut b = [0u8; 8];
                        read_exact(&mut r, &mut b)?;
                        f64::from_le_bytes(b)
                    }
                    DType::F32 => {
                        let mut b = [0u8; 4];
                        read_exact(&mut r, &mut b)?;
                        f32::from_le_bytes(b) as f64
                    }
                });
            }
            store.insert(
                name,
                StoredTensor {
                    shape,
                    dtype,
                    values,
                },
            )?;
        }
        if !r.is_empty() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| NnError::Checkpoint("truncated container".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
