//! On-disk tensor container.
//!
//! Layout: magic `CTF1`, rank (u8), extents (u32 LE each), then the
//! payload as little-endian f32, row-major. The payload length must be
//! exactly 4 * product(dims); trailing bytes are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CTF1";

/// A parsed tensor file. Extents may be zero at this layer (the file
/// is structurally valid); converting to a [`Tensor`] enforces
/// positive extents.
#[derive(Debug, Clone, PartialEq)]
pub struct CtfTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl CtfTensor {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            self.dims.clone(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

pub fn encode_ctf(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 1 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_ctf(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ctf(t))?;
    Ok(())
}

pub fn decode_ctf(bytes: &[u8]) -> Result<CtfTensor> {
    if bytes.len() < 5 {
        return Err(Error::Format("tensor file truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("tensor file has bad magic".into()));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("tensor file truncated in dims".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 5 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor extent product overflows".into()))?;
    let expected = header + 4 * count;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "tensor payload truncated: file has {} bytes, dims {:?} need {}",
            bytes.len(),
            dims,
            expected
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - expected
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(CtfTensor { dims, data })
}

pub fn read_ctf(path: impl AsRef<Path>) -> Result<CtfTensor> {
    let bytes = std::fs::read(path)?;
    decode_ctf(&bytes)
}
