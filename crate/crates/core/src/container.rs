//! The `DRIS` parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "DRIS"
//! version    u32       currently 1
//! count      u32       number of entries
//! entries    sorted by name, each:
//!   name_len u32, name (UTF-8)
//!   kind     u8        0 = f32 tensor, 1 = UTF-8 text
//!   kind 0:  ndim u32, dims u64 x ndim, values f32 x prod(dims)
//!   kind 1:  len u64, bytes
//! ```
//!
//! Entries are written in name order, so equal contents always produce
//! equal bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRIS";
pub const VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;

/// Dense f32 tensor payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self {
            dims: t.dims().to_vec(),
            values,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), self.dims.as_slice(), device)?)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &TensorData) -> bool {
        self.dims == other.dims
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(TensorData),
    Text(String),
}

/// In-memory view of a container file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, data: TensorData) {
        self.entries.insert(name.into(), Entry::Tensor(data));
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.entries.insert(name.into(), Entry::Text(text.into()));
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorData> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Some(t),
            _ => None,
        }
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(s)) => Some(s),
            _ => None,
        }
    }

    /// All tensors whose name starts with `prefix`.
    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, TensorData> {
        self.entries
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .filter_map(|(k, v)| match v {
                Entry::Tensor(t) => Some((k.clone(), t.clone())),
                Entry::Text(_) => None,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(KIND_TENSOR);
                    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
                    for d in &t.dims {
                        out.extend_from_slice(&(*d as u64).to_le_bytes());
                    }
                    for v in &t.values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.push(KIND_TEXT);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Container("entry name is not UTF-8".into()))?
                .to_string();
            let entry = match r.u8()? {
                KIND_TENSOR => {
                    let ndim = r.u32()? as usize;
                    let dims = (0..ndim)
                        .map(|_| r.u64().map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let n: usize = dims.iter().product();
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                        Error::Container(format!("tensor `{name}` is too large"))
                    })?)?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Entry::Tensor(TensorData { dims, values })
                }
                KIND_TEXT => {
                    let len = r.u64()? as usize;
                    let s = std::str::from_utf8(r.take(len)?)
                        .map_err(|_| Error::Container(format!("text `{name}` is not UTF-8")))?;
                    Entry::Text(s.to_string())
                }
                k => return Err(Error::Container(format!("unknown entry kind {k}"))),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(Error::Container(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Container("trailing bytes".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
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
            .ok_or_else(|| Error::Container("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// SHA-256 over names, dims and raw value bytes, in name order.
pub fn digest(tensors: &BTreeMap<String, TensorData>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.dims.len() as u64).to_le_bytes());
        for d in &t.dims {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.values {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Container::new();
        c.insert_tensor(
            "a",
            TensorData {
                dims: vec![2],
                values: vec![1.0, -2.5],
            },
        );
        let b = c.to_bytes();
        assert_eq!(&b[0..4], b"DRIS");
        assert_eq!(u32::from_le_bytes([b[4], b[5], b[6], b[7]]), 1);
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 1);
        // name_len, "a", kind, ndim, dim, 2 floats
        assert_eq!(b.len(), 12 + 4 + 1 + 1 + 4 + 8 + 8);
        assert_eq!(&b[b.len() - 4..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Container::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0").is_err());
        let mut b = Container::new().to_bytes();
        b[4] = 9;
        assert!(Container::from_bytes(&b).is_err());
        let mut c = Container::new();
        c.insert_text("x", "hello");
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn digest_detects_single_bit_change() {
        let mut m = BTreeMap::new();
        m.insert(
            "w".to_string(),
            TensorData {
                dims: vec![3],
                values: vec![0.0, 1.0, 2.0],
            },
        );
        let d0 = digest(&m);
        m.get_mut("w").unwrap().values[0] = -0.0;
        assert_ne!(d0, digest(&m));
    }

    proptest! {
        #[test]
        fn roundtrip(
            tensors in proptest::collection::btree_map(
                "[a-z/_.]{1,12}",
                (1usize..4, proptest::collection::vec(any::<f32>(), 0..24)),
                0..6,
            ),
            text in ".{0,40}",
        ) {
            let mut c = Container::new();
            for (name, (rows, vals)) in &tensors {
                let cols = vals.len() / rows;
                let values = vals[..rows * cols].to_vec();
                c.insert_tensor(name.clone(), TensorData { dims: vec![*rows, cols], values });
            }
            c.insert_text("meta/text", text);
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
