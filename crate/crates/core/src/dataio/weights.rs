//! `CLFW` weights container.
//!
//! Layout, all integers little-endian:
//!
//! | field        | size            |
//! |--------------|-----------------|
//! | magic `CLFW` | 4               |
//! | version      | u32             |
//! | entry count  | u32             |
//!
//! then per entry: name length (u32), UTF-8 name, dtype tag (u8: 0 = f32,
//! 1 = f64), rank (u32), one u64 per extent, and the raw little-endian
//! values in row-major order.

use std::path::Path;

use indexmap::IndexMap;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::numerics::{DType, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CLFW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn save_weights<'a>(path: impl AsRef<Path>, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let entries: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match t.dtype() {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    write_file(path.as_ref(), &out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format_at_byte(self.path, self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

pub fn load_weights(path: impl AsRef<Path>) -> Result<IndexMap<String, Tensor>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::format_at_byte(path, 0, "bad magic, expected CLFW"));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::format_at_byte(path, 4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format_at_byte(path, name_at + 4, "name is not UTF-8"))?
            .to_string();
        let tag_at = r.pos;
        let dtype = match r.take(1, "dtype")?[0] {
            0 => DType::F32,
            1 => DType::F64,
            t => return Err(Error::format_at_byte(path, tag_at, format!("unknown dtype tag {t}"))),
        };
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| Error::format_at_byte(path, r.pos, "extent product overflows"))?;
        let size = n
            .checked_mul(dtype.size_of())
            .ok_or_else(|| Error::format_at_byte(path, r.pos, "tensor size overflows"))?;
        let raw = r.take(size, "values")?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        let t = Tensor::new(shape, data)?.to_dtype(dtype);
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::format_at_byte(path, name_at, format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format_at_byte(path, r.pos, "trailing bytes after last entry"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.clfw");
        save_weights(&p, std::iter::empty()).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 12);
        assert!(load_weights(&p).unwrap().is_empty());
    }

    #[test]
    fn single_f32_entry_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.clfw");
        let t = Tensor::from_fn([2, 3], |i| i as f64).to_dtype(DType::F32);
        save_weights(&p, [("w", &t)]).unwrap();
        // header 12 + name length 4 + name 1 + dtype 1 + rank 4 + extents 2·8 + values 6·4
        assert_eq!(std::fs::read(&p).unwrap().len(), 12 + 4 + 1 + 1 + 4 + 16 + 24);
        let back = load_weights(&p).unwrap();
        assert_eq!(back["w"], t);
    }

    #[test]
    fn corrupt_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.clfw");
        save_weights(&p, std::iter::empty()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_weights(&p), Err(Error::Format { .. })));
        bytes[0] = b'C';
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_weights(&p).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.clfw");
        save_weights(&p, [("w", &Tensor::ones([4]))]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_weights(&p).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("byte offset"), "{err}");
    }
}
