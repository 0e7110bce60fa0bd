//! Neutral binary container for named `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0        8-byte magic "RINEWTS1"
//! 8        u64 manifest length L
//! 16       L bytes of UTF-8 JSON manifest
//! ...      zero padding up to the next multiple of 64
//! payload  raw row-major f32 tensors, each starting at a multiple of 64
//!          bytes from the payload start
//! ```
//!
//! The manifest is
//! `{"format_version":1,"kind":..,"config":{..},"meta":{..},"tensors":{name:{"dtype":"f32","shape":[..],"offset":..}}}`
//! where `offset` is relative to the payload start. Tensor names are kept in
//! sorted order so writing the same content twice yields identical bytes.
//! Backbone weights, head weights and training checkpoints all use this format
//! and differ only in `kind`, `config` and `meta`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RINEWTS1";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: Value,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// In-memory view of a container file.
#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub config: Value,
    pub meta: BTreeMap<String, Value>,
    tensors: BTreeMap<String, Tensor<f32>>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(kind: &str, config: Value) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::container(name, "missing tensor"))
    }

    /// Removes `name` and checks its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::container(name, "missing tensor"))?;
        if t.shape() != shape {
            return Err(Error::container(
                name,
                format!("shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    /// Fails if any tensor was left unconsumed by [`take`](Self::take).
    pub fn expect_consumed(&self) -> Result<()> {
        match self.tensors.keys().next() {
            Some(name) => Err(Error::container(name, "unexpected tensor")),
            None => Ok(()),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::container(
                "kind",
                format!("container holds `{}`, expected `{kind}`", self.kind),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                },
            );
            offset = align_up(offset + t.len() * 4);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let payload_start = align_up(16 + json.len());

        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for t in self.tensors.values() {
            out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            let padded = payload_start + align_up(out.len() - payload_start);
            out.resize(padded, 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::container("magic", "not a RINEWTS1 container"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::container("manifest", "truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)
            .map_err(|e| Error::container("manifest", e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::container(
                "format_version",
                format!("unsupported version {}", manifest.format_version),
            ));
        }
        let payload = &bytes[align_up(16 + len).min(bytes.len())..];
        let mut tensors = BTreeMap::new();
        for (name, entry) in manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::container(&name, format!("unsupported dtype {}", entry.dtype)));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            if !start.is_multiple_of(ALIGN) {
                return Err(Error::container(&name, "misaligned tensor offset"));
            }
            let raw = payload
                .get(start..start + count * 4)
                .ok_or_else(|| Error::container(&name, "tensor data out of bounds"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, data)
                .map_err(|e| Error::container(&name, e.to_string()))?;
            tensors.insert(name, t);
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new("test", json!({"d": 3}));
        c.insert("b", Tensor::new(vec![3], vec![1.0, -2.5, 3.25]).unwrap());
        c.insert("a", Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, f32::MIN_POSITIVE]).unwrap());
        c.meta.insert("note".into(), json!("hi"));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"RINEWTS1");
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("a").unwrap(), c.get("a").unwrap());
        assert_eq!(back.get("b").unwrap(), c.get("b").unwrap());
        assert_eq!(back.config, json!({"d": 3}));
        assert_eq!(back.meta["note"], json!("hi"));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn payload_is_aligned() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let start = align_up(16 + len);
        assert_eq!(start % 64, 0);
        for e in manifest.tensors.values() {
            assert_eq!(e.offset % 64, 0);
        }
        assert_eq!(manifest.tensors["b"].offset, 64);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        let truncated = bytes[..bytes.len() - 60].to_vec();
        let err = Container::from_bytes(&truncated).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
        bytes[0] = b'X';
        let err = Container::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn take_checks_shape_and_presence() {
        let mut c = sample();
        assert!(c.take("a", &[4]).unwrap_err().to_string().contains("`a`"));
        let mut c2 = sample();
        c2.take("a", &[2, 2]).unwrap();
        assert!(c2.expect_consumed().is_err());
        c2.take("b", &[3]).unwrap();
        c2.expect_consumed().unwrap();
        assert!(c.take("zzz", &[1]).unwrap_err().to_string().contains("missing"));
    }
}
