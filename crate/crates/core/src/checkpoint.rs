//! Parameter checkpoints.
//!
//! Layout: magic `MSTR`, version `u16`, record count `u32`, then per record
//! the name length `u32`, the UTF-8 name, ndim `u8`, dims as `u32` and the
//! row-major f32 values. Little-endian throughout.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MSTR";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(e.rows as u32).to_le_bytes());
        out.extend_from_slice(&(e.cols as u32).to_le_bytes());
        for v in &e.data {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { path: self.path.to_path_buf() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "MSTR" });
    }
    let mut r = Reader { bytes, pos: 4, path };
    let v = r.take(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), version });
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: parameter name is not UTF-8", path.display())))?;
        let ndim = r.take(1)?[0] as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copies records into matching parameters. Names starting with one of
/// `optional` may be absent on either side; any other unmatched name or
/// any shape mismatch is an error. Returns how many parameters were loaded.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, records: &[Record], optional: &[&str]) -> Result<usize> {
    let mut loaded = 0;
    for e in store.entries_mut() {
        match records.iter().find(|r| r.name == e.name) {
            Some(r) => {
                if r.dims != [e.rows, e.cols] {
                    return Err(Error::Checkpoint(format!(
                        "`{}` has shape {:?} in the checkpoint, {:?} in the model",
                        e.name,
                        r.dims,
                        [e.rows, e.cols]
                    )));
                }
                e.data = r.data.iter().map(|&v| T::of(f64::from(v))).collect();
                loaded += 1;
            }
            None if optional.iter().any(|p| e.name.starts_with(p)) => {}
            None => return Err(Error::Checkpoint(format!("parameter `{}` missing from checkpoint", e.name))),
        }
    }
    if let Some(r) = records
        .iter()
        .find(|r| store.id(&r.name).is_none() && !optional.iter().any(|p| r.name.starts_with(p))) {
        return Err(Error::Checkpoint(format!("checkpoint parameter `{}` does not exist in the model", r.name)));
    }
    Ok(loaded)
}
