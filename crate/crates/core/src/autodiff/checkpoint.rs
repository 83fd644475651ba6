//! The "CKPT" container: named `f32` tensors, sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use super::{GraphError, Tensor};

const MAGIC: &[u8; 4] = b"CKPT";

/// Named tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    /// Like [`Checkpoint::get`] but reports a missing entry or a shape
    /// mismatch as an error.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>, GraphError> {
        let t = self
            .entries
            .get(name)
            .ok_or_else(|| GraphError::Checkpoint(format!("missing entry {name}")))?;
        if t.shape() != shape {
            return Err(GraphError::Checkpoint(format!(
                "entry {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn u32_of(n: usize, what: &str) -> Result<[u8; 4], GraphError> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| GraphError::Checkpoint(format!("{what} {n} exceeds u32")))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, GraphError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32_of(ck.len(), "entry count")?);
    for (name, t) in ck.iter() {
        out.extend_from_slice(&u32_of(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.shape().len(), "rank")?);
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dim")?);
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], GraphError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            GraphError::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, GraphError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, GraphError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(GraphError::Checkpoint(format!("bad magic {magic:02x?}")));
    }
    let count = r.u32()?;
    let mut ck = Checkpoint::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| GraphError::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(GraphError::Checkpoint(format!("entries not sorted by name at {name}")));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| GraphError::Checkpoint(format!("entry {name}: shape overflow")))?;
        let payload = r.take(n.checked_mul(4).ok_or_else(|| GraphError::Checkpoint("payload overflow".into()))?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| GraphError::Checkpoint(format!("entry {name}: {e}")))?;
        ck.insert(name.clone(), t);
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(GraphError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ck)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), GraphError> {
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, GraphError> {
    let bytes = std::fs::read(path).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("b", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        ck.insert("a", Tensor::new(vec![1, 2, 1], vec![0.25, f32::MIN_POSITIVE]).unwrap());
        ck
    }

    #[test]
    fn layout_is_sorted_and_exact() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert_eq!(&bytes[..4], &[0x43, 0x4B, 0x50, 0x54]);
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'a');
        // 4 + 4 + (4 + 1 + 4 + 12 + 8) + (4 + 1 + 4 + 4 + 8)
        assert_eq!(bytes.len(), 58);
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn require_checks_shape() {
        let ck = sample();
        assert!(ck.require("b", &[2]).is_ok());
        assert!(ck.require("b", &[1, 2]).is_err());
        assert!(ck.require("c", &[2]).is_err());
    }
}
