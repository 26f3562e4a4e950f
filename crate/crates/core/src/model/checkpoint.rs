//! Binary checkpoint format, all integers and reals little-endian:
//!
//! ```text
//! magic      8 bytes  "EOSLABCK"
//! version    u32
//! dims       4 x u64  feature, vocab, embed, hidden
//! seed       u64
//! count      u32      number of tensors
//! tensor*    u64 length, then length x f64
//! ```

use std::fs;
use std::path::Path;

use super::params::{CaptionerParams, ModelDims, TENSOR_COUNT};
use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EOSLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl CaptionerParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_weights() + 8 * TENSOR_COUNT);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let d = &self.dims;
        for v in [d.feature_dim, d.vocab_size, d.embed_dim, d.hidden_dim] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors().len() as u32).to_le_bytes());
        for t in self.tensors() {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let dims = ModelDims {
            feature_dim: r.usize()?,
            vocab_size: r.usize()?,
            embed_dim: r.usize()?,
            hidden_dim: r.usize()?,
        };
        dims.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        if count != TENSOR_COUNT {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, expected {TENSOR_COUNT}"
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for shape in dims.shapes() {
            let len = r.usize()?;
            let expected: usize = shape.iter().product();
            if len != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor of length {len} where {expected} was expected"
                )));
            }
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Array::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        CaptionerParams::from_tensors(dims, seed, tensors)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size does not fit in usize".into()))
    }
}

/// Writes atomically via a sibling temp file.
pub fn save_checkpoint(path: &Path, params: &CaptionerParams) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, params.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CaptionerParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CaptionerParams::from_bytes(&bytes)
}
