//! Checkpoint file format, all integers and floats little-endian:
//!
//! ```text
//! magic        b"SPCK"
//! version      u32
//! config_hash  u64
//! step         u64
//! count        u32
//! count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank x u32
//!   data       prod(dims) x f32
//! ```
//!
//! There is no padding, and the file must end exactly after the last tensor.

use std::fs;
use std::path::Path;

use pinlab_core::training::Checkpoint;
use pinlab_core::Tensor;

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint truncated in field {field} at byte {offset}")]
    Truncated { field: String, offset: usize },
    #[error("bad magic {found:?}, expected \"SPCK\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("field {field} is invalid: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{extra} trailing bytes after the last tensor")]
    TrailingBytes { extra: usize },
}

fn put_u32(out: &mut Vec<u8>, v: usize, field: &str) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Invalid {
        field: field.into(),
        reason: format!("{v} does not fit in u32"),
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    put_u32(&mut out, ckpt.tensors.len(), "tensor_count")?;
    for (i, (name, t)) in ckpt.tensors.iter().enumerate() {
        put_u32(&mut out, name.len(), &format!("tensor[{i}].name_len"))?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank(), &format!("tensor[{i}].rank"))?;
        for &d in t.shape() {
            put_u32(&mut out, d, &format!("tensor[{i}].dims"))?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                field: field.into(),
                offset: self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config_hash = r.u64("config_hash")?;
    let step = r.u64("step")?;
    let count = r.u32("tensor_count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(r.remaining() / 8));
    for i in 0..count {
        let name_len = r.u32(&format!("tensor[{i}].name_len"))? as usize;
        let name_field = format!("tensor[{i}].name");
        let name = std::str::from_utf8(r.take(name_len, &name_field)?)
            .map_err(|e| CheckpointError::Invalid {
                field: name_field,
                reason: e.to_string(),
            })?
            .to_owned();
        let rank = r.u32(&format!("tensor[{i}].rank"))? as usize;
        let dims_field = format!("tensor[{i}].dims");
        if rank * 4 > r.remaining() {
            return Err(CheckpointError::Truncated {
                field: dims_field,
                offset: r.pos,
            });
        }
        let dims = (0..rank)
            .map(|_| r.u32(&dims_field).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let data_field = format!("tensor[{i}].data");
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| CheckpointError::Invalid {
                field: dims_field.clone(),
                reason: format!("element count of {dims:?} overflows"),
            })?;
        let raw = r.take(numel * 4, &data_field)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| CheckpointError::Invalid {
            field: data_field,
            reason: e.to_string(),
        })?;
        tensors.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes { extra: r.remaining() });
    }
    Ok(Checkpoint {
        config_hash,
        step,
        tensors,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}
