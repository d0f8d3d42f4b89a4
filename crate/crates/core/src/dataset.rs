//! Binary container for encoded samples.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "CVDS"
//! version  u32 (= 1)
//! vocab    u32 length + UTF-8 tokenizer hash
//! count    u64 number of samples
//! per sample:
//!   u32 length + UTF-8 conversation id
//!   u32 length + UTF-8 target speaker
//!   u32 ref_len, u32 conv_len
//!   L x u32 token ids, L x u32 type ids, L x u32 position ids, L x u32 loss mask
//! ```
//!
//! where `L = ref_len + conv_len`.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::encode::{EncodedSample, TokenType};

const MAGIC: &[u8; 4] = b"CVDS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not an encoded dataset (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab_hash: String,
    pub samples: Vec<EncodedSample>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.vocab_hash);
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            put_str(&mut out, &s.conversation_id);
            put_str(&mut out, &s.target_speaker);
            put_u32(&mut out, s.ref_len as u32);
            put_u32(&mut out, s.conv_len as u32);
            s.token_ids.iter().for_each(|&v| put_u32(&mut out, v));
            s.type_ids.iter().for_each(|&v| put_u32(&mut out, v.id()));
            s.position_ids.iter().for_each(|&v| put_u32(&mut out, v));
            s.loss_mask.iter().for_each(|&v| put_u32(&mut out, v as u32));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DatasetError::Version(version));
        }
        let vocab_hash = r.string()?;
        let count = r.u64()? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let conversation_id = r.string()?;
            let target_speaker = r.string()?;
            let ref_len = r.u32()? as usize;
            let conv_len = r.u32()? as usize;
            let l = ref_len + conv_len;
            let token_ids = r.u32s(l)?;
            let type_ids = r
                .u32s(l)?
                .into_iter()
                .map(|t| TokenType::from_id(t).ok_or_else(|| DatasetError::Corrupt(format!("type id {t}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let position_ids = r.u32s(l)?;
            let loss_mask = r
                .u32s(l)?
                .into_iter()
                .map(|m| u8::try_from(m).map_err(|_| DatasetError::Corrupt(format!("mask {m}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let sample = EncodedSample {
                conversation_id,
                target_speaker,
                token_ids,
                type_ids,
                position_ids,
                loss_mask,
                ref_len,
                conv_len,
            };
            sample
                .validate()
                .map_err(|e| DatasetError::Corrupt(e.to_string()))?;
            samples.push(sample);
        }
        if r.pos != bytes.len() {
            return Err(DatasetError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            vocab_hash,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DatasetError::Corrupt("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, DatasetError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String, DatasetError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| DatasetError::Corrupt(e.to_string()))
    }
}
