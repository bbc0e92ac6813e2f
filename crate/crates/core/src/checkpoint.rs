//! Versioned weight container shared by classifiers and maskers.
//!
//! Layout: `b"SFCK"`, u32 format version, u64 header length, a JSON header
//! (architecture tag, training step, free-form metadata, tensor table), then
//! the tensors' f32 values, little-endian, in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        assert_eq!(
            t.shape.iter().product::<usize>(),
            t.data.len(),
            "{}: shape/data",
            t.name
        );
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: String,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| {
            Error::Format(format!(
                "missing tensor `{name}` in {} checkpoint",
                self.arch
            ))
        })
    }

    /// Copies tensor `name` into `dst`, checking the element count.
    pub fn load_into(&self, name: &str, dst: &mut [f32]) -> Result<()> {
        let t = self.get(name)?;
        if t.data.len() != dst.len() {
            return Err(Error::Format(format!(
                "tensor `{name}` has {} values, expected {}",
                t.data.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&t.data);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            arch: self.arch.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: self.tensors.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let total: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 16 + hlen;
        let mut tensors = header.tensors;
        for t in &mut tensors {
            let n: usize = t.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| Error::Format(format!("truncated data for `{}`", t.name)))?;
            t.data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            arch: header.arch,
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("bin.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// SHA-256 over tensor names and values (metadata excluded).
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            arch: "test".into(),
            step: 42,
            meta: serde_json::json!({"k": 3}),
            tensors: vec![
                NamedTensor::new("a", vec![2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]),
                NamedTensor::new("b", vec![3], vec![0.0, 1e-30, -7.25]),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/ck.bin");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.weights_hash(), c.weights_hash());
        let mut d = c.clone();
        d.tensors[1].data[0] = 1.0;
        assert_ne!(d.weights_hash(), c.weights_hash());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        let err = Checkpoint::from_bytes(&wrong).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
