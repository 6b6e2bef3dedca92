//! Self-describing checkpoint container.
//!
//! Layout: magic `VLFG`, a little-endian u32 format version, a u64 header
//! length, a JSON header (kind, user header, tensor directory), then the
//! concatenated f64 little-endian tensor payloads. Writing is byte-for-byte
//! deterministic for identical contents.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"VLFG";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    header: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: a kind tag, an arbitrary JSON header, and named
/// tensors in insertion order.
pub struct Container {
    pub kind: String,
    pub header: serde_json::Value,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, header: serde_json::Value) -> Self {
        Container { kind: kind.into(), header, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
            }
        }
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        }
        let header = Header {
            version: CONTAINER_VERSION,
            kind: self.kind.clone(),
            header: self.header.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");

        let mut buf = Vec::with_capacity(16 + header_bytes.len() + offset * 8);
        buf.extend_from_slice(CONTAINER_MAGIC);
        buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for t in &self.tensors {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        file.write_all(&buf)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if bytes.len() < 16 || &bytes[0..4] != CONTAINER_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint container", path.display())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version} (expected {CONTAINER_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + header_len {
            return Err(Error::Checkpoint("truncated container header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
            .map_err(|e| Error::Checkpoint(format!("bad container header: {e}")))?;
        let payload = &bytes[16 + header_len..];

        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for entry in header.tensors {
            let start = entry.offset * 8;
            let end = start + entry.len * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {} out of bounds", entry.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            names.push(entry.name);
            tensors.push(Tensor::new(entry.shape, data));
        }
        Ok(Container { kind: header.kind, header: header.header, names, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bytes_and_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vlfg");
        let mut c = Container::new("test", serde_json::json!({"alpha": 0.5}));
        c.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, 4.0]));
        c.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]));
        c.write(&path).unwrap();
        let first = std::fs::read(&path).unwrap();

        let back = Container::read(&path).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.get("a").unwrap().data(), &[1.0, -2.5, 3.0, 4.0]);
        assert_eq!(back.get("b").unwrap().shape(), &[3]);

        back.write(&path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vlfg");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(Container::read(&path).is_err());
    }
}
