//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ME2C" | version u8 | echo_len u32 | echo (TOML, UTF-8) | n_blobs u32 |
//!   per blob: name_len u16 | name | ndim u8 | dims u32* | dtype u8 | data
//! ```
//!
//! `dtype` is 0 for 32-bit and 1 for 64-bit floats. Parameters are written
//! as 64-bit so a save/load cycle is exact; 32-bit blobs are accepted on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Heads, ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ME2C";
pub const VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Echo {
    #[serde(default)]
    meta: BTreeMap<String, String>,
    subjects: BTreeMap<String, usize>,
    #[serde(default)]
    heads: Heads,
    model: ModelConfig,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

/// Serializes parameters plus free-form metadata (echoed as TOML).
pub fn to_bytes(params: &ModelParams, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let echo = Echo {
        meta: meta.clone(),
        subjects: params.subjects.clone(),
        heads: params.heads,
        model: params.config.clone(),
    };
    let text = toml::to_string(&echo).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, returning the parameters and the metadata echo.
pub fn from_bytes(buf: &[u8]) -> Result<(ModelParams, BTreeMap<String, String>)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(len)?).map_err(|_| corrupt("echo is not UTF-8"))?;
    let echo: Echo = toml::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    let n = c.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let nl = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nl)?)
            .map_err(|_| corrupt("blob name is not UTF-8"))?
            .to_string();
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data: Vec<f64> = match c.u8()? {
            DTYPE_F32 => c
                .take(count * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DTYPE_F64 => c
                .take(count * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            d => return Err(corrupt(format!("{name}: unknown dtype {d}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate blob {name}")));
        }
    }
    if c.pos != buf.len() {
        return Err(corrupt("trailing bytes"));
    }
    let mut params = ModelParams::from_parts(echo.model, echo.subjects, tensors)?;
    params.heads = echo.heads;
    Ok((params, echo.meta))
}

pub fn save(path: &Path, params: &ModelParams, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_bytes(params, meta)?;
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams, BTreeMap<String, String>)> {
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut buf).map_err(io)?;
    from_bytes(&buf)
}
