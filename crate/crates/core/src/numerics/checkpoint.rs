//! Flat binary checkpoint container for named parameter tensors.
//!
//! Layout: an 8-byte magic, format version, precision tag, entry count, then
//! per-entry headers (name, shape) in sorted name order, then the raw
//! little-endian element data in the same order. Writing the result of a read
//! reproduces the input byte for byte.

use std::path::Path;

use super::params::ParamSet;
use super::scalar::{Precision, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QFPARAMS";
const VERSION: u32 = 1;

/// Serializes a parameter set into the container format.
pub fn to_bytes<S: Scalar>(params: &ParamSet<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(S::PRECISION.byte_width() as u8);
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &ext in tensor.shape() {
            out.extend_from_slice(&(ext as u64).to_le_bytes());
        }
    }
    for (_, tensor) in params.iter() {
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Parses a parameter set from container bytes; the stored precision must
/// match `S`.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ParamSet<S>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a parameter container".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported container version {version}")));
    }
    let width = r.take(1)?[0] as usize;
    if width != S::PRECISION.byte_width() {
        return Err(Error::Checkpoint(format!(
            "precision mismatch: container holds {}-byte elements, expected {} ({})",
            width,
            S::PRECISION.byte_width(),
            S::PRECISION
        )));
    }
    r.take(3)?;
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        headers.push((name, shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in headers {
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        let data: Vec<S> = raw.chunks_exact(width).map(S::read_le).collect();
        params.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after data", bytes.len() - r.pos)));
    }
    Ok(params)
}

/// Writes a checkpoint file.
pub fn save<S: Scalar>(path: &Path, params: &ParamSet<S>) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint file in the expected precision.
pub fn load<S: Scalar>(path: &Path) -> Result<ParamSet<S>> {
    if !path.exists() {
        return Err(Error::MissingInput { path: path.to_path_buf() });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads only the precision tag of a checkpoint file.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    if !path.exists() {
        return Err(Error::MissingInput { path: path.to_path_buf() });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a parameter container".into()));
    }
    match bytes[12] {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        w => Err(Error::Checkpoint(format!("unknown precision tag {w}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
