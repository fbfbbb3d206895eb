//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"CDNT"
//! version  u32
//! n_meta   u32, then n_meta × (key: str, value: str)
//! n_entry  u32, then n_entry × entry
//! entry    name: str, precision: u8 (0 = f32, 1 = f64), ndim: u32,
//!          dims: ndim × u64, values: product(dims) raw LE floats
//! str      len: u32, then UTF-8 bytes
//! ```

use std::path::Path;

use super::{numel, ParamStore, Precision, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CDNT";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    /// Raw little-endian values.
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::PRECISION.byte_width());
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            precision: T::PRECISION,
            bytes,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.precision != T::PRECISION {
            return Err(Error::Format(format!(
                "entry {:?} stored as {:?}, requested {:?}",
                self.name,
                self.precision,
                T::PRECISION
            )));
        }
        let data = self
            .bytes
            .chunks_exact(self.precision.byte_width())
            .map(T::read_le)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self {
            metadata: Vec::new(),
            entries: store
                .iter()
                .map(|(_, p)| Entry::from_tensor(p.name.clone(), &p.tensor))
                .collect(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.push((key.into(), value.into()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            store.add(e.name.clone(), e.to_tensor()?)?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(e.precision.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n_meta = r.u32()?;
        let mut metadata = Vec::new();
        for _ in 0..n_meta {
            metadata.push((r.str()?, r.str()?));
        }
        let n_entries = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..n_entries {
            let name = r.str()?;
            let tag = r.take(1)?[0];
            let precision = Precision::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("unknown precision tag {tag}")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| Error::Format("extent overflow".into()))?);
            }
            let len = numel(&shape)
                .checked_mul(precision.byte_width())
                .ok_or_else(|| Error::Format("entry too large".into()))?;
            let bytes = r.take(len)?.to_vec();
            entries.push(Entry {
                name,
                shape,
                precision,
                bytes,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(Self { metadata, entries })
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f32>(), 1..40),
                                   wide in proptest::collection::vec(any::<f64>(), 1..10)) {
            let mut store = ParamStore::<f32>::new();
            let n = values.len();
            store.add("a.weight", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
            let ck = Checkpoint::from_store(&store)
                .with_meta("config", "seed = 1")
                .with_meta("epoch", "3");
            let mut ck = ck;
            ck.entries.push(Entry::from_tensor("wide", &Tensor::new(vec![1, wide.len()], wide.clone()).unwrap()));
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(&back, &ck);
            let restored: ParamStore<f32> = Checkpoint { metadata: vec![], entries: back.entries[..1].to_vec() }.to_store().unwrap();
            let got = restored.get(restored.id("a.weight").unwrap()).tensor.data();
            prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
            let w: Tensor<f64> = back.entries[1].to_tensor().unwrap();
            prop_assert!(w.data().iter().zip(&wide).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn rejects_truncated_and_foreign_data() {
        let ck = Checkpoint::from_store(&{
            let mut s = ParamStore::<f64>::new();
            s.add("w", Tensor::zeros(vec![3])).unwrap();
            s
        });
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(ck.entries[0].to_tensor::<f32>().is_err());
    }
}
