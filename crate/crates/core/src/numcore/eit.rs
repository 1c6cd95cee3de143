//! The `EIT1` binary tensor container.
//!
//! Layout: the magic bytes `EIT1`, one `u8` rank, `rank` little-endian `u32`
//! dims, then the elements as little-endian `f64` in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EIT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let t = read_from(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", r.len())));
    }
    Ok(t)
}

/// Reads one tensor from a stream (several may be concatenated).
pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(|_| Error::Format("truncated header".into()))?;
    let rank = rank[0] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated dims".into()))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated data".into()))?;
        data.push(f64::from_le_bytes(b));
    }
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Writes a sequence of tensors back to back.
pub fn save_all(path: impl AsRef<Path>, tensors: &[&Tensor]) -> Result<()> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend(encode(t));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut r = bytes.as_slice();
    let mut out = Vec::new();
    while !r.is_empty() {
        out.push(read_from(&mut r)?);
    }
    Ok(out)
}
