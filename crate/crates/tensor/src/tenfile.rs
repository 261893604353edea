//! `.ten` tensor files.
//!
//! Layout: magic `TEN1`, little-endian `u32` rank, `rank` little-endian `u32`
//! extents, then the `f32` payload in row-major order, little-endian. Nothing
//! may follow the payload.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TEN1";

#[derive(Debug, Error)]
pub enum TenError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected TEN1")]
    BadMagic([u8; 4]),
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<u32>),
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, TenError> {
    let end = at + 4;
    let chunk = bytes.get(at..end).ok_or(TenError::Truncated { needed: end, found: bytes.len() })?;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4-byte slice")))
}

/// Parses a `.ten` byte buffer.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, TenError> {
    let magic: [u8; 4] = bytes.get(..4).ok_or(TenError::Truncated { needed: 4, found: bytes.len() })?.try_into().expect("4-byte slice");
    if &magic != MAGIC {
        return Err(TenError::BadMagic(magic));
    }
    let rank = read_u32(bytes, 4)? as usize;
    let header = 8usize.checked_add(rank.checked_mul(4).ok_or(TenError::InvalidShape(vec![]))?).ok_or(TenError::InvalidShape(vec![]))?;
    if header > bytes.len() {
        return Err(TenError::Truncated { needed: header, found: bytes.len() });
    }
    let extents: Vec<u32> = (0..rank).map(|i| read_u32(bytes, 8 + 4 * i)).collect::<Result<_, _>>()?;
    if rank == 0 || extents.contains(&0) {
        return Err(TenError::InvalidShape(extents));
    }
    let count =
        extents.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e as usize)).ok_or_else(|| TenError::InvalidShape(extents.clone()))?;
    let needed = count.checked_mul(4).and_then(|p| p.checked_add(header)).ok_or_else(|| TenError::InvalidShape(extents.clone()))?;
    if needed > bytes.len() {
        return Err(TenError::Truncated { needed, found: bytes.len() });
    }
    if needed < bytes.len() {
        return Err(TenError::TrailingBytes(bytes.len() - needed));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
    let shape: Vec<usize> = extents.iter().map(|&e| e as usize).collect();
    Ok(Tensor::new(&shape, data).expect("validated shape"))
}

pub fn encode(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write(path: &Path, tensor: &Tensor<f32>) -> Result<(), TenError> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor<f32>, TenError> {
    decode(&fs::read(path)?)
}
