//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FOSS1"
//! u32                 tensor count
//! per tensor:
//!   u16               name length in bytes
//!   [u8]              UTF-8 name
//!   u8                dtype (0 = f32, 1 = f64)
//!   u8                rank
//!   u32 * rank        dims
//!   values            raw little-endian f32 or f64, row-major
//! u32                 metadata length in bytes
//! [u8]                UTF-8 JSON metadata
//! ```

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 5] = b"FOSS1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint truncated at byte {offset} (needed {needed} more)")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} unexpected trailing bytes after metadata")]
    TrailingBytes(usize),
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint has unknown parameter {0}")]
    UnexpectedParameter(String),
    #[error("shape mismatch for {name}: model {model:?}, checkpoint {stored:?}")]
    ShapeMismatch {
        name: String,
        model: Vec<usize>,
        stored: Vec<usize>,
    },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("invalid UTF-8 in tensor name or metadata")]
    BadUtf8,
    #[error("invalid tensor header: {0}")]
    BadHeader(String),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: serde_json::Value) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            metadata,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every stored tensor into `store`; names must match one to one.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for (_, p) in store.iter() {
            if self.get(&p.name).is_none() {
                return Err(CheckpointError::MissingParameter(p.name.clone()));
            }
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| CheckpointError::UnexpectedParameter(name.clone()))?;
            let model_shape = store.value(id).shape().to_vec();
            if model_shape != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    model: model_shape,
                    stored: t.shape().to_vec(),
                });
            }
            *store.value_mut(id) = t.to_dtype(store.dtype());
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::DuplicateName(name.clone()));
            }
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| CheckpointError::BadHeader(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.dtype().code());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t.dtype() {
                DType::F32 => t
                    .data()
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => t
                    .data()
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            // A prefix of the magic is a truncated file, anything else is foreign.
            if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
                return Err(CheckpointError::Truncated {
                    offset: bytes.len(),
                    needed: MAGIC.len() - bytes.len(),
                });
            }
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::BadUtf8)?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::DuplicateName(name));
            }
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or(CheckpointError::UnknownDtype(code))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let raw = r.take(n * width)?;
            let data = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let t = Tensor::with_dtype(&shape, data, dtype)
                .map_err(|e| CheckpointError::BadHeader(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        let mlen = r.u32()? as usize;
        let meta = r.take(mlen)?;
        let text = std::str::from_utf8(meta).map_err(|_| CheckpointError::BadUtf8)?;
        let metadata = serde_json::from_str(text)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
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
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
