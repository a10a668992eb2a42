//! Binary checkpoint format.
//!
//! Layout (little endian): `AMCK`, u32 version, u64 length + JSON model
//! config, u64 tensor count, then per tensor u32 rank, rank x u64 dims and
//! the f64 values. Tensors follow [`ModelParams::tensors`] order.

use std::path::Path;

use super::model::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (shape, data) in tensors {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut params = ModelParams::zeros(config)?;
    let expected: Vec<Vec<usize>> = params.tensors().into_iter().map(|(s, _)| s).collect();
    let count = r.len()?;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    let mut slots = params.tensors_mut();
    for (i, shape) in expected.iter().enumerate() {
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: shape {dims:?}, expected {shape:?}"
            )));
        }
        for v in slots[i].iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    drop(slots);
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
