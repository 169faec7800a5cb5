//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "EOCD" | u32 version | u32 len, config (UTF-8 TOML) | u32 tensor count
//! per tensor: u32 len, name (UTF-8) | u8 dtype (0 = f32) | u32 ndim | u32 dims[ndim] | f32 values
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"EOCD";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let config = toml::to_string(model.config())
        .map_err(|e| Error::Config(format!("cannot serialise model config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        put_str(&mut out, name);
        out.push(DTYPE_F32);
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in t.shape().0 {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("file too short for magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic, not an EOCD checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_text = r.string()?;
    let config: ModelConfig = toml::from_str(&config_text)
        .map_err(|e| Error::Format(format!("invalid config block: {e}")))?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let ndim = r.u32()? as usize;
        if ndim != 4 {
            return Err(Error::Format(format!("tensor `{name}` has rank {ndim}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let shape = Shape(dims);
        let raw = r.take(shape.numel().checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Model::from_params(config, Params::from_entries(entries)).map_err(|e| match e {
        Error::Config(m) => Error::Compat(m),
        other => other,
    })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
