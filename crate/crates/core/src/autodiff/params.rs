//! Named parameter tensors and the `MPAW` checkpoint container.
//!
//! Layout (little-endian): magic `"MPAW"`, version `u8`, count `u32`, then
//! per parameter: name length `u16` + UTF-8 name, rank `u8`, extents
//! `u32[rank]`, raw `f32` values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPAW";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value: Arc::new(value),
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].value.clone()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.value(self.id(name)?))
    }

    /// Mutable access to a parameter's values (copy-on-write if a graph still holds it).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = self.value(id);
        if cur.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {}: shape {:?} vs {:?}",
                self.name(id),
                cur.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks exactly the parameters matching `pred` trainable and freezes the rest.
    pub fn train_only(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.train_only(|_| false);
    }

    /// Total number of scalar values over parameters whose name satisfies `pred`.
    pub fn count(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn count_trainable(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && pred(&p.name))
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names and `f32` bytes of the frozen parameters, in insertion order.
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every parameter of `other` into `self`, inserting missing ones.
    pub fn merge_from(&mut self, other: &ParameterStore<T>) -> Result<()> {
        for p in &other.params {
            match self.index.get(&p.name) {
                Some(&i) => self.set(ParamId(i), (*p.value).clone())?,
                None => {
                    self.insert(&p.name, (*p.value).clone(), p.trainable)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::format(format!("parameter name too long: {}", p.name)))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name);
            let shape = p.value.shape();
            buf.push(
                u8::try_from(shape.len())
                    .map_err(|_| Error::format("parameter rank exceeds 255"))?,
            );
            for &e in shape {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.value.data() {
                buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint; every parameter is marked trainable.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint: bad magic"));
        }
        let version = cur.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("checkpoint: unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let nlen = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|_| Error::format("checkpoint: parameter name is not UTF-8"))?
                .to_string();
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint: size overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("checkpoint: {e}")))?;
            store.insert(&name, t, true)?;
        }
        if !cur.is_done() {
            return Err(Error::format("checkpoint: trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

/// Bounds-checked little-endian reader.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_preserves_names_shapes_values() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("a.w", Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., -6.5]).unwrap(), true)
            .unwrap();
        s.insert("b", Tensor::scalar(0.25), false).unwrap();
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"MPAW");
        // header 4+1+4, "a.w": 2+3+1+8+24, "b": 2+1+1+4+4
        assert_eq!(bytes.len(), 9 + 38 + 12);
        let back = ParameterStore::<f32>::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back.get("a.w").unwrap(), s.get("a.w").unwrap());
        assert_eq!(back.get("b").unwrap().data(), &[0.25]);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[4]), true).unwrap();
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        for cut in 0..bytes.len() {
            let r = ParameterStore::<f32>::read_checkpoint(&bytes[..cut]);
            assert!(matches!(r, Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("x", Tensor::zeros(&[1]), true).unwrap();
        assert!(s.insert("x", Tensor::zeros(&[1]), true).is_err());
    }
}
