//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LBCK" | version: u32 | entries: u32
//! per entry: name_len: u32 | name (UTF-8) | rank: u32 | extents: rank × u32
//!            | payload: numel × f32, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::nn::Module;
use crate::tensor::{Param, Tensor};

pub const MAGIC: &[u8; 4] = b"LBCK";
pub const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

/// Serializes named tensors; values are stored as `f32`.
pub fn encode<T: Element>(entries: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| err("entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(err("trailing bytes after last entry"));
    }
    Ok(entries)
}

/// Snapshot of every parameter and buffer of `module`, named with `prefix`.
pub fn entries_of<T: Element>(module: &dyn Module<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
    module
        .params()
        .iter()
        .map(|p| (format!("{prefix}{}", p.name()), p.value()))
        .collect()
}

pub fn save<T: Element>(path: &Path, module: &dyn Module<T>, prefix: &str) -> Result<()> {
    let bytes = encode(&entries_of(module, prefix));
    let mut f = fs::File::create(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    f.write_all(&bytes)
        .map_err(|e| err(format!("{}: {e}", path.display())))
}

/// Overwrites every parameter of `module` from the checkpoint entries.
/// Names and shapes must match exactly.
pub fn load_into<T: Element>(
    entries: &[(String, Tensor<T>)],
    module: &dyn Module<T>,
    prefix: &str,
) -> Result<()> {
    let params: Vec<Param<T>> = module.params();
    if params.len() != entries.len() {
        return Err(err(format!(
            "model has {} tensors, checkpoint has {}",
            params.len(),
            entries.len()
        )));
    }
    for p in &params {
        let want = format!("{prefix}{}", p.name());
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == want)
            .ok_or_else(|| err(format!("missing entry `{want}`")))?;
        p.assign(t)?;
    }
    Ok(())
}

pub fn load<T: Element>(path: &Path, module: &dyn Module<T>, prefix: &str) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    load_into(&decode::<T>(&bytes)?, module, prefix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&[("w".to_string(), t)]);
        assert_eq!(&bytes[..4], b"LBCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'w');
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &2u32.to_le_bytes());
        assert_eq!(&bytes[25..29], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f32>::zeros(vec![3]);
        let mut bytes = encode(&[("a".to_string(), t)]);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode::<f32>(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode::<f32>(&bytes).is_err());
    }
}
