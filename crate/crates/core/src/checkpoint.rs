//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"AMSSCKPT"  u8 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 ndim, ndim × u64 dim, Π dim × f64 }
//! ```

use std::path::Path;

use crate::error::{AmssError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AMSSCKPT";
pub const VERSION: u8 = 1;

pub fn to_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.tensor.data() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            AmssError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint into `(name, tensor)` pairs in stored order.
pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AmssError::Checkpoint("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(AmssError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| AmssError::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| AmssError::Checkpoint(format!("{name}: shape overflows")))?;
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| AmssError::Checkpoint("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| AmssError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(AmssError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    from_bytes(&std::fs::read(path)?)
}

/// Overwrites `params` with checkpoint values; names and shapes must match
/// exactly.
pub fn restore_into(params: &mut ParamStore, saved: &[(String, Tensor)]) -> Result<()> {
    if saved.len() != params.len() {
        return Err(AmssError::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            saved.len(),
            params.len()
        )));
    }
    for (name, t) in saved {
        let id = params
            .find(name)
            .ok_or_else(|| AmssError::Checkpoint(format!("unknown parameter {name}")))?;
        if params.get(id).shape() != t.shape() {
            return Err(AmssError::Checkpoint(format!(
                "{name}: shape {:?} does not match model {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
    }
    for (name, t) in saved {
        let id = params.find(name).expect("checked");
        *params.get_mut(id) = t.clone();
    }
    Ok(())
}
