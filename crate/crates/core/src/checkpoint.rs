//! The `DFL1` binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "DFL1"
//! version u32   (currently 1)
//! count   u32
//! count × { name_len u16, name utf-8, rank u8, dims u32 × rank, data f32 × prod(dims) }
//! ```
//!
//! Values are stored as 32-bit floats; in-memory `f64` values are narrowed on
//! write and widened exactly on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netcore::{ParamTensor, Parameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFL1";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[ParamTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::validation("too many tensors for one checkpoint"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::validation(format!("tensor name too long: {}", t.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(t.value.rank())
            .map_err(|_| Error::validation(format!("tensor {} has rank > 255", t.name)))?;
        out.push(rank);
        for &d in t.value.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::validation(format!("dimension {d} of {} exceeds u32", t.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(t.value.len() * 4);
        for &v in t.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<ParamTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"DFL1\""),
        });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: name_at,
                message: format!("tensor {i} name is not utf-8: {e}"),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: r.pos,
                message: format!("tensor {name} size overflows"),
            })?;
        let raw = r.take(len, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        tensors.push(ParamTensor {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(tensors)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, tensors: &[ParamTensor]) -> Result<()> {
    write_atomic(path, &encode(tensors)?)
}

pub fn load(path: &Path) -> Result<Vec<ParamTensor>> {
    decode(&fs::read(path)?)
}

pub fn save_parameters(path: &Path, params: &Parameters) -> Result<()> {
    save(path, params.entries())
}

pub fn load_parameters(path: &Path) -> Result<Parameters> {
    Ok(Parameters::from_entries(load(path)?))
}

/// Rounds every value to the nearest `f32`, i.e. what a save/load cycle
/// yields.
pub fn round_to_storage(params: &Parameters) -> Parameters {
    let mut p = params.clone();
    for e in p.entries_mut() {
        for v in e.value.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
    p
}
