//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"T2LCKPT"  u32 version
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 ndims, ndims × u32 dims
//!   prod(dims) × f32
//! ```
//!
//! Values are written as `f32`; a store kept in [`Precision::F32`] therefore
//! round-trips bit-exactly.
//!
//! [`Precision::F32`]: crate::Precision::F32

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AdError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"T2LCKPT";
pub const VERSION: u32 = 1;

pub fn write<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AdError::Checkpoint {
                msg: format!("truncated {what}"),
                offset: self.pos as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into `(name, tensor)` records.
pub fn read_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(AdError::Checkpoint {
            msg: "bad magic".into(),
            offset: 0,
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(AdError::Checkpoint {
            msg: format!("unsupported version {version}"),
            offset: MAGIC.len() as u64,
        });
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let start = c.pos as u64;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| AdError::Checkpoint {
                msg: "name is not UTF-8".into(),
                offset: start,
            })?
            .to_string();
        let nd = c.u32("rank")? as usize;
        if nd == 0 || nd > 4 {
            return Err(AdError::Checkpoint {
                msg: format!("rank {nd} out of range for {name}"),
                offset: start,
            });
        }
        let dims = (0..nd)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = c.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write(store, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads `path` into `store`, which must already hold the same parameters.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    store.assign(read_records(&bytes)?)
}
