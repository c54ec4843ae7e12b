//! Versioned named-tensor container for backbone, prompt and head weights.
//!
//! Layout, all little endian:
//!
//! ```text
//! "CILF" | version: u32 | tensor*
//! tensor = name_len: u64 | name: utf-8 | rank: u64 | dims: u64 × rank | values: f64 × Π dims
//! ```
//!
//! Tensors run until end of file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CILF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                expected: (n - left) as u64,
                found: left as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected CILF".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let rank = cur.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?.into_iter().collect())
}
