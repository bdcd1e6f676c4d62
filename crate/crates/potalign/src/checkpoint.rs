//! Binary container for named f64 tensors (checkpoints and datasets).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "POTA" | version u32 | count u32 |
//!   per entry: name_len u32 | name bytes | rank u32 | dims u32 x rank |
//!              payload f64 x numel
//! ```
//!
//! Round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::DenseTensor;

pub const MAGIC: [u8; 4] = *b"POTA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a POTA container")]
    BadMagic,

    #[error("unsupported container version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),

    #[error("truncated container while reading {0}")]
    Truncated(&'static str),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialize named tensors to the container format.
pub fn encode(entries: &[(String, DenseTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse a container from bytes.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, DenseTensor)>, CheckpointError> {
    let mut r = Reader { data: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|e| CheckpointError::Malformed(format!("entry name not UTF-8: {e}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        let payload = r.take(numel * 8, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        let tensor = DenseTensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("entry {name}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn save_tensors(path: &Path, entries: &[(String, DenseTensor)]) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(entries))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, DenseTensor)>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
