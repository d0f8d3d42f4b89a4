//! Binary checkpoints: a JSON header plus named raw tensors.
//!
//! ```text
//! magic    "CVCK"
//! version  u32 (= 1)
//! header   u32 length + canonical JSON (CheckpointHeader)
//! count    u32 number of tensors, in name order
//! per tensor:
//!   u32 length + UTF-8 name
//!   u32 ndims, ndims x u64 dims
//!   u8 dtype (0 = f32, 1 = f64)
//!   raw little-endian values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, TransformerParams};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"CVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint was built with tokenizer {found}, expected {expected}")]
    TokenizerMismatch { expected: String, found: String },
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Optimizer progress needed to resume a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub iteration: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tokenizer_hash: String,
    #[serde(default)]
    pub train_state: Option<TrainState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    /// Model parameters and, when present, optimizer moments under
    /// `adam.m.<name>` / `adam.v.<name>`.
    pub tensors: BTreeMap<String, Tensor<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ModelConfig, tokenizer_hash: String, params: &TransformerParams<T>) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model,
                tokenizer_hash,
                train_state: None,
            },
            tensors: params.tensors.clone(),
        }
    }

    /// Model parameters only, checked against the header config.
    pub fn params(&self) -> Result<TransformerParams<T>, CheckpointError> {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adam."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let params = TransformerParams { tensors };
        params.check_against(&self.header.model)?;
        Ok(params)
    }

    pub fn require_tokenizer(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.header.tokenizer_hash != expected {
            return Err(CheckpointError::TokenizerMismatch {
                expected: expected.to_string(),
                found: self.header.tokenizer_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(match T::DTYPE {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint, converting stored values to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let ndims = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndims.min(8));
            for _ in 0..ndims {
                shape.push(r.u64()? as usize);
            }
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(CheckpointError::Corrupt(format!("dtype {d}"))),
            };
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflow")))?;
            let width = dtype.size_bytes();
            let raw = r.take(n.checked_mul(width).ok_or_else(|| CheckpointError::Corrupt("size overflow".into()))?)?;
            let data: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| match dtype {
                    DType::F32 => T::from_f64(f32::read_le(c) as f64),
                    DType::F64 => T::from_f64(f64::read_le(c)),
                })
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { header, tensors })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
