//! Checkpoint files: named tensors in a little-endian binary layout.
//!
//! Layout: 8-byte magic `BNNCKPT\0`, `u32` format version, `u32` tensor
//! count, then per tensor: `u32` name length + UTF-8 name, `u32` rank,
//! `u32` dims, raw `f32` values. Values are stored as `f32` regardless of
//! the in-memory scalar type. Readers reject unknown magic or versions.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BNNCKPT\0";
pub const VERSION: u32 = 1;

pub fn save<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_model<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    save(path, &model.named_tensors())
}

/// Byte cursor with offset-anchored errors.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!(
                    "truncated: needed {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::format(path, 0, "bad magic: not a checkpoint file"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(
            path,
            8,
            format!("unsupported checkpoint format version {version} (expected {VERSION})"),
        ));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, cur.pos as u64, "tensor name is not UTF-8"))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(out)
}

/// Copies checkpoint tensors into a freshly built model. The name sets and
/// shapes must match exactly, otherwise the checkpoint belongs to a
/// different architecture or configuration.
pub fn apply_to_model<T: Scalar>(
    model: &mut Model<T>,
    entries: &[(String, Tensor<f32>)],
) -> Result<()> {
    let mut targets = model.named_tensors_mut();
    if targets.len() != entries.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            targets.len()
        )));
    }
    for (name, dst) in targets.iter_mut() {
        let (_, src) = entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
        if src.shape() != dst.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = T::of_f64(s as f64);
        }
    }
    Ok(())
}

pub fn load_into_model<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let entries = load(path)?;
    apply_to_model(model, &entries)
}
