//! Model checkpoints: magic `ASLM`, version, the serialized model
//! configuration, then named parameter blobs (name, shape, 64-bit
//! little-endian reals) in registration order.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASLM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.config().to_text();
    let cfg_bytes = cfg.as_bytes();
    buf.extend_from_slice(&(cfg_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_bytes);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, entry) in model.params().iter() {
        let name = entry.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(entry.value.rank() as u32).to_le_bytes());
        for &d in entry.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in entry.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Rebuilds a model from a checkpoint. The parameter set must match the
/// stored configuration exactly.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected ASLM"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len, "config")?)
        .map_err(|_| Error::format(path, cur.pos as u64, "config is not utf-8"))?;
    let config = ModelConfig::from_text(cfg_text)?;

    // Seed is irrelevant: every parameter is overwritten below.
    let mut model = Model::new(config, 0)?;

    let n_params = cur.u32("parameter count")? as usize;
    if n_params != model.params().len() {
        return Err(Error::format(
            path,
            cur.pos as u64,
            format!(
                "checkpoint has {n_params} parameters, model expects {}",
                model.params().len()
            ),
        ));
    }
    for _ in 0..n_params {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::format(path, cur.pos as u64, "parameter name is not utf-8"))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data_offset = cur.pos;
        let raw = cur.take(numel * 8, "parameter data")?;
        let mut data = Vec::with_capacity(numel);
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(
                    path,
                    (data_offset + i * 8) as u64,
                    format!("non-finite value in parameter {name}"),
                ));
            }
            data.push(v);
        }
        model
            .params_mut()
            .load_value(&name, Tensor::new(&shape, data)?)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            path,
            cur.pos as u64,
            format!("{} trailing bytes after last parameter", bytes.len() - cur.pos),
        ));
    }
    Ok(model)
}
