//! Binary tensor container.
//!
//! ```text
//! "LGER" | version u32 | count u32 |
//!   count × ( name_len u32 | name utf-8 | dtype u8 (0 = f64) | ndim u32 | dims u64… | data LE )
//! ```
//! All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"LGER";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.num_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamSet> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            expected: VERSION,
            found: version,
        });
    }
    let count = c.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::CorruptCheckpoint(format!("{name}: unknown dtype {dtype}")));
        }
        let ndim = c.u32("ndim")?;
        if ndim != 2 {
            return Err(Error::CorruptCheckpoint(format!("{name}: expected 2 dims, found {ndim}")));
        }
        let rows = c.u64("dims")? as usize;
        let cols = c.u64("dims")? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape overflows")))?;
        let data = c
            .take(n * 8, &name)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if params.contains(&name) {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor {name}")));
        }
        params.insert(name, Tensor::new(rows, cols, data));
    }
    if c.pos != buf.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

/// Writes through a temporary file so a failed save never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(params)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

/// Checks that every tensor of `template` is present in `loaded` with the
/// same shape.
pub fn check_shapes(loaded: &ParamSet, template: &ParamSet) -> Result<()> {
    for (name, t) in template.iter() {
        match loaded.get(name) {
            None => return Err(Error::CorruptCheckpoint(format!("missing tensor {name}"))),
            Some(l) if l.shape() != t.shape() => {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape(),
                    found: l.shape(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}
