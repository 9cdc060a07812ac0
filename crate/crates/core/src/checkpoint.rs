//! PGKT checkpoint stream: named `f64` tensors, little-endian.
//!
//! ```text
//! "PGKT" | version: u8 | count: u32
//! count × { name_len: u32 | name: utf-8 | ndim: u32 | extents: u64 × ndim | values: f64 × Π extents }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::RealTensor;

pub const MAGIC: &[u8; 4] = b"PGKT";
pub const VERSION: u8 = 1;

pub fn encode(records: &[(String, RealTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses a checkpoint held in memory; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, RealTensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected PGKT".into()));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        r.pos = 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let start = r.pos;
        let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: start as u64,
            message: "name is not utf-8".into(),
        })?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| r.err(format!("tensor {name}: shape {shape:?} overflows")))?;
        let raw = r.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = RealTensor::new(shape, data).map_err(|e| r.err(format!("tensor {name}: {e}")))?;
        records.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last record".into()));
    }
    Ok(records)
}

pub fn write_checkpoint(path: impl AsRef<Path>, records: &[(String, RealTensor)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, RealTensor)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
