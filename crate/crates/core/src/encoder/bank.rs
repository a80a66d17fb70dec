//! Precomputed embedding banks.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "SEMB" | version: u16 | dim: u32 | count: u32
//! count × ( key_len: u16 | key: utf-8 | dim × f32 )
//! ```
//!
//! A JSON mirror `{"dim": d, "items": {key: [floats]}}` is accepted for
//! hand-written fixtures.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SEMB";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBank {
    dim: usize,
    items: IndexMap<String, Vec<f32>>,
}

impl EmbeddingBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            items: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.items.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.items.contains_key(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f32>) -> Result<()> {
        let key = key.into();
        if values.len() != self.dim {
            return Err(Error::Format(format!(
                "entry {key:?} has {} values, bank dimension is {}",
                values.len(),
                self.dim
            )));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Format(format!("key longer than {} bytes", u16::MAX)));
        }
        self.items.insert(key, values);
        Ok(())
    }

    /// Stored vector as written, without normalization.
    pub fn raw(&self, key: &str) -> Result<&[f32]> {
        self.items
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| self.missing(key))
    }

    /// L2-normalized stored vector.
    pub fn lookup(&self, key: &str) -> Result<Vec<f32>> {
        let v = self.raw(key)?;
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(format!("bank entry {key:?} has norm {n}")));
        }
        Ok(v.iter().map(|x| x / n).collect())
    }

    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::Format(format!(
                "embedding bank has dimension {}, model expects {dim}",
                self.dim
            )));
        }
        Ok(())
    }

    fn missing(&self, key: &str) -> Error {
        let mut scored: Vec<(usize, &String)> = self
            .items
            .keys()
            .map(|k| (strsim::levenshtein(key, k), k))
            .collect();
        scored.sort();
        Error::Lookup {
            key: key.to_string(),
            nearest: scored.into_iter().take(3).map(|(_, k)| k.clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.items.len() * (self.dim * 4 + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        for (k, v) in &self.items {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing SEMB magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported SEMB version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut bank = Self::new(dim);
        for _ in 0..count {
            let klen = r.u16()? as usize;
            let key = std::str::from_utf8(r.take(klen)?)
                .map_err(|e| Error::Format(format!("key is not UTF-8: {e}")))?
                .to_string();
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.f32()?);
            }
            bank.items.insert(key, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - r.pos
            )));
        }
        Ok(bank)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: EmbeddingBank = serde_json::from_str(text)?;
        for (k, v) in &bank.items {
            if v.len() != bank.dim {
                return Err(Error::Format(format!(
                    "entry {k:?} has {} values, bank dimension is {}",
                    v.len(),
                    bank.dim
                )));
            }
        }
        Ok(bank)
    }

    /// Reads either format, dispatching on the magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Format(format!("{} is neither SEMB nor JSON", path.display())))?;
            Self::from_json(&text)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!("truncated input at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingBank {
        let mut b = EmbeddingBank::new(3);
        b.insert("unit", vec![0.0, 1.0, 0.0]).unwrap();
        b.insert("raw", vec![3.0, 4.0, 0.0]).unwrap();
        b
    }

    #[test]
    fn lookup_normalizes() {
        let b = sample();
        assert_eq!(b.lookup("unit").unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(b.lookup("raw").unwrap(), vec![0.6, 0.8, 0.0]);
    }

    #[test]
    fn unknown_key_names_key_and_neighbours() {
        let err = sample().lookup("unti").unwrap_err();
        match &err {
            Error::Lookup { key, nearest } => {
                assert_eq!(key, "unti");
                assert_eq!(nearest[0], "unit");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("unti"));
    }

    #[test]
    fn binary_layout_is_exact() {
        let mut b = EmbeddingBank::new(2);
        b.insert("k", vec![1.0, -2.0]).unwrap();
        let bytes = b.to_bytes();
        let mut expected = b"SEMB".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'k');
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(EmbeddingBank::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn malformed_inputs_rejected() {
        let bytes = sample().to_bytes();
        assert!(EmbeddingBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(EmbeddingBank::from_bytes(b"NOPE").is_err());
        assert!(EmbeddingBank::from_json(r#"{"dim": 2, "items": {"a": [1.0]}}"#).is_err());
        assert!(sample().expect_dim(4).is_err());
        assert!(sample().insert("x", vec![1.0]).is_err());
    }

    #[test]
    fn json_mirror_reads() {
        let b = EmbeddingBank::from_json(r#"{"dim": 2, "items": {"a": [0.0, 2.0]}}"#).unwrap();
        assert_eq!(b.lookup("a").unwrap(), vec![0.0, 1.0]);
    }
}
