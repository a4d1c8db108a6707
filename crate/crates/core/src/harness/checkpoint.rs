//! Versioned binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "CFLCKPT\0"  u32 version  u64 spec_len  spec (JSON)
//! u64 count    count × { u32 name_len  name  u32 ndim  ndim × u64  data as f64 }
//! 32-byte SHA-256 of everything before it
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CflError, Result};
use crate::model::{CflModel, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CFLCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(model: &CflModel) -> Result<Vec<u8>> {
    let spec = serde_json::to_vec(&model.spec).map_err(|e| CflError::Format(e.to_string()))?;
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    b.extend_from_slice(&spec);
    b.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (_, e) in model.params.iter() {
        b.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        b.extend_from_slice(e.name.as_bytes());
        b.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
        for &d in e.value.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    Ok(b)
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| CflError::Format("checkpoint truncated".into()))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| CflError::Format("length overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CflModel> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(CflError::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CflError::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { b: body, at: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CflError::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u64()?;
    let spec: ModelSpec = serde_json::from_slice(r.take(n)?).map_err(|e| CflError::Format(e.to_string()))?;
    let mut model = CflModel::new(spec)?;
    let count = r.u64()?;
    if count != model.params.len() {
        return Err(CflError::Format(format!(
            "checkpoint holds {count} tensors, model has {}",
            model.params.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (_, e) in model.params.iter() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|e| CflError::Format(e.to_string()))?;
        if name != e.name {
            return Err(CflError::Format(format!("expected tensor {}, found {name}", e.name)));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| CflError::Format("tensor size overflows".into()))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| CflError::Format("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        values.push(Tensor::new(shape, data)?);
    }
    if r.at != body.len() {
        return Err(CflError::Format("trailing bytes after tensors".into()));
    }
    model.load_values(values)?;
    Ok(model)
}

pub fn save(model: &CflModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CflModel> {
    decode(&std::fs::read(path)?)
}
