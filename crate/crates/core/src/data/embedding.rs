//! Class-labelled feature vectors on disk.
//!
//! ```text
//! "CILE" | version: u32 | n: u64 | d: u64 | num_classes: u64 | dtype: u32
//! rows: n × d floats (dtype 0 = f32, 1 = f64) | labels: n × u32
//! ```
//!
//! Everything is little endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CILE";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub dtype: Dtype,
}

impl EmbeddingFile {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, dtype: Dtype) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(
                "embedding file",
                format!("features {:?} vs {} labels", features.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        if num_classes > u32::MAX as usize + 1 {
            return Err(Error::InvalidArgument("labels must fit in u32".into()));
        }
        Ok(EmbeddingFile {
            features,
            labels,
            num_classes,
            dtype,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn encode(&self) -> Vec<u8> {
        let (n, d) = (self.features.rows(), self.features.cols());
        let mut out = Vec::with_capacity(HEADER_LEN + n * d * self.dtype.width() + 4 * n);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        out.extend_from_slice(&self.dtype.tag().to_le_bytes());
        for &x in self.features.data() {
            match self.dtype {
                Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: (HEADER_LEN - bytes.len()) as u64,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..4] != EMBEDDING_MAGIC {
            return Err(Error::Format("bad embedding magic, expected CILE".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != EMBEDDING_VERSION {
            return Err(Error::Format(format!("unsupported embedding version {version}")));
        }
        let (n, d, classes) = (u64_at(8), u64_at(16), u64_at(24));
        let dtype = match u32_at(32) {
            0 => Dtype::F32,
            1 => Dtype::F64,
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        };
        let need = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(dtype.width() as u64))
            .and_then(|b| b.checked_add(4 * n))
            .and_then(|b| b.checked_add(HEADER_LEN as u64))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        let have = bytes.len() as u64;
        if have < need {
            return Err(Error::Truncated {
                expected: need - have,
                found: have,
            });
        }
        if have > need {
            return Err(Error::Format(format!("{} trailing bytes after payload", have - need)));
        }
        let (n, d) = (n as usize, d as usize);
        let w = dtype.width();
        let body = &bytes[HEADER_LEN..HEADER_LEN + n * d * w];
        let data: Vec<f64> = body
            .chunks_exact(w)
            .map(|c| match dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        let labels: Vec<usize> = bytes[HEADER_LEN + n * d * w..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        EmbeddingFile::new(Tensor::from_vec(&[n, d], data)?, labels, classes as usize, dtype)
    }
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    fs::write(path, file.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingFile::decode(&bytes)
}
