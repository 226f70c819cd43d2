//! Named parameter storage and the `OFCK` checkpoint format:
//! `OFCK` | u32 count | per tensor: u32 name length, name bytes,
//! 4×u32 shape, f32 LE payload.

use std::collections::HashMap;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OFCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as running normalization statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    value: Tensor<T>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, kind, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.index.get(name).map(|&i| self.entries[i].kind)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.kind, &e.value))
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Serializes every tensor (trainable and buffers) in insertion order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            for d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
            }
        }
        out
    }

    /// Overwrites values from a checkpoint. Every stored tensor must exist
    /// here with the same shape, and every tensor here must be present.
    pub fn load(&mut self, bytes: &[u8]) -> Result<()> {
        let tensors = decode_checkpoint::<T>(bytes)?;
        if tensors.len() != self.entries.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, t) in tensors {
            let slot = self
                .get_mut(&name)
                .ok_or_else(|| Error::format(format!("unknown tensor {name} in checkpoint")))?;
            if slot.shape() != t.shape() {
                return Err(Error::format(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub fn name(&mut self) -> Result<String> {
        let len = self.u32()?;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::format("tensor name is not utf-8"))
    }

    pub fn shape(&mut self) -> Result<[usize; 4]> {
        Ok([self.u32()?, self.u32()?, self.u32()?, self.u32()?])
    }

    pub fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format("trailing bytes in checkpoint"));
        }
        Ok(())
    }
}

/// Parses an `OFCK` payload into `(name, tensor)` pairs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let mut r = ByteReader { bytes, pos: 4 };
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.name()?;
        let shape = r.shape()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format("tensor too large"))?;
        let data = r.f32s(n)?;
        out.push((name, Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?));
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut s = ParamStore::<f32>::new();
        s.insert("conv.w", ParamKind::Trainable, Tensor::new([2, 1, 1, 3], vec![1.0, -2.0, 0.5, 3.25, 0.0, 1e-7]).unwrap())
            .unwrap();
        s.insert("bn.mean", ParamKind::Buffer, Tensor::filled([1, 2, 1, 1], 0.3)).unwrap();
        let bytes = s.encode();
        assert_eq!(&bytes[..4], b"OFCK");
        let mut t = s.clone();
        t.get_mut("conv.w").unwrap().data_mut()[0] = 9.0;
        t.load(&bytes).unwrap();
        assert_eq!(t, s);

        let mut wrong = ParamStore::<f32>::new();
        wrong.insert("conv.w", ParamKind::Trainable, Tensor::zeros([1, 1, 1, 1])).unwrap();
        wrong.insert("bn.mean", ParamKind::Buffer, Tensor::zeros([1, 2, 1, 1])).unwrap();
        assert!(matches!(wrong.load(&bytes), Err(Error::Format(_))));
        assert!(t.load(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", ParamKind::Trainable, Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(s.insert("a", ParamKind::Buffer, Tensor::zeros([1, 1, 1, 1])).is_err());
    }
}
