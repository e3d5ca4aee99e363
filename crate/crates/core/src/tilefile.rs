//! Binary tensor files.
//!
//! Layout: magic `MTRO`, version `u16`, dtype `u8` (0 = f32, 1 = u16),
//! ndim `u8`, `ndim` dims as `u32`, then the row-major payload. All
//! integers and values are little-endian.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTRO";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    U16 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    U16(ArrayD<u16>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::U16(a) => a.shape(),
        }
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let (dtype, shape) = match t {
        Tensor::F32(a) => (DType::F32, a.shape()),
        Tensor::U16(a) => (DType::U16, a.shape()),
    };
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + n * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t {
        Tensor::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Tensor::U16(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = || Error::Truncated { path: path.to_path_buf() };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "MTRO" });
    }
    if bytes.len() < 8 {
        return Err(truncated());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), version });
    }
    let dtype = match bytes[6] {
        0 => DType::F32,
        1 => DType::U16,
        d => return Err(Error::invalid(format!("{}: unknown dtype code {d}", path.display()))),
    };
    let ndim = bytes[7] as usize;
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated());
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() < n * dtype.width() {
        return Err(truncated());
    }
    if payload.len() > n * dtype.width() {
        return Err(Error::shape(format!("{}: trailing bytes after payload", path.display())));
    }
    Ok(match dtype {
        DType::F32 => {
            let v = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Tensor::F32(ArrayD::from_shape_vec(IxDyn(&shape), v).expect("length checked"))
        }
        DType::U16 => {
            let v = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            Tensor::U16(ArrayD::from_shape_vec(IxDyn(&shape), v).expect("length checked"))
        }
    })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads an f32 tensor and checks its shape.
pub fn read_f32(path: &Path, expected: &[usize]) -> Result<ArrayD<f32>> {
    match read_tensor(path)? {
        Tensor::F32(a) if a.shape() == expected => Ok(a),
        Tensor::F32(a) => Err(Error::shape(format!(
            "{}: shape {:?} differs from declared {:?}",
            path.display(),
            a.shape(),
            expected
        ))),
        Tensor::U16(_) => Err(Error::invalid(format!("{}: expected f32 payload", path.display()))),
    }
}

pub fn read_u16(path: &Path, expected: &[usize]) -> Result<ArrayD<u16>> {
    match read_tensor(path)? {
        Tensor::U16(a) if a.shape() == expected => Ok(a),
        Tensor::U16(a) => Err(Error::shape(format!(
            "{}: shape {:?} differs from declared {:?}",
            path.display(),
            a.shape(),
            expected
        ))),
        Tensor::F32(_) => Err(Error::invalid(format!("{}: expected u16 payload", path.display()))),
    }
}
