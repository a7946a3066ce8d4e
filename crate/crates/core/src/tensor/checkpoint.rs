//! CCKP1 parameter checkpoints.
//!
//! ```text
//! "CCKP1\n"                      6 bytes
//! count                          u32 LE
//! per tensor:
//!   name_len                     u32 LE
//!   name                         name_len bytes, UTF-8
//!   rank                         u32 LE
//!   extents                      rank × u32 LE
//!   payload                      Π extents × f64 LE
//! ```

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CCKP1\n";

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 4 * t.rank() + 8 * t.len()).sum();
    let mut out = Vec::with_capacity(10 + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("need {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "CCKP1\\n" });
    }
    let mut cur = Cursor { bytes, pos: CHECKPOINT_MAGIC.len(), path };
    let count = cur.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|e| Error::Parse(format!("{}: tensor name is not UTF-8: {e}", path.display())))?
            .to_string();
        let rank = cur.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(cur.u32("extent")?);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Parse("tensor too large".into()))?, "payload")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault(format!("{}: non-finite value in `{name}`", path.display())));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Parse(format!("{}: tensor `{name}`: {e}", path.display())))?;
        out.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse(format!("{}: {} trailing bytes", path.display(), bytes.len() - cur.pos)));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
