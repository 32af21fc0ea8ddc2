//! Binary feature container: magic `ASLF`, version, frame/channel counts,
//! then row-major 64-bit little-endian reals.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"ASLF";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_feature_file(path: &Path, frames: usize, dim: usize, data: &[f64]) -> Result<()> {
    if data.len() != frames * dim {
        return Err(Error::invalid(format!(
            "feature payload of {} values does not match {}x{}",
            data.len(),
            frames,
            dim
        )));
    }
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "refusing to write non-finite feature value at index {bad}"
        )));
    }
    let mut buf = Vec::with_capacity(16 + data.len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(frames)
        .map_err(|_| Error::invalid("frame count exceeds u32"))?
        .to_le_bytes());
    buf.extend_from_slice(&u32::try_from(dim)
        .map_err(|_| Error::invalid("channel count exceeds u32"))?
        .to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads and validates a feature file into a `[frames, dim]` tensor.
pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    if bytes.len() < 16 {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("header truncated: {} of 16 bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected ASLF"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        ));
    }
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if frames == 0 || dim == 0 {
        return Err(Error::format(path, 8, "empty feature grid"));
    }
    let expected = 16 + frames * dim * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("payload length {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(frames * dim);
    for i in 0..frames * dim {
        let off = 16 + i * 8;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                path,
                off as u64,
                format!("non-finite value at flat index {i}"),
            ));
        }
        data.push(v);
    }
    Tensor::new(&[frames, dim], data)
}
