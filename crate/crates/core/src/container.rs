//! `DONDATA1` container: magic, `u32` LE manifest length, JSON manifest,
//! then raw little-endian `f64` tensors in the order the manifest lists them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"DONDATA1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a DONDATA1 file")]
    BadMagic,
    #[error("file truncated: {0}")]
    Truncated(&'static str),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, m)| TensorEntry {
                    name: n.clone(),
                    shape: [m.rows(), m.cols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len()).map_err(|_| ContainerError::Tensor {
            name: "manifest".into(),
            msg: "longer than 4 GiB".into(),
        })?;
        let payload: usize = self.tensors.iter().map(|(_, m)| m.data().len() * 8).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let len_bytes: [u8; 4] = bytes.get(8..12).ok_or(ContainerError::Truncated("length"))?.try_into().expect("4 bytes");
        let len = u32::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(12..12 + len).ok_or(ContainerError::Truncated("manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let mut pos = 12 + len;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n = e.shape[0].checked_mul(e.shape[1]).ok_or_else(|| ContainerError::Tensor {
                name: e.name.clone(),
                msg: "shape overflows".into(),
            })?;
            let end = n.checked_mul(8).and_then(|b| b.checked_add(pos)).ok_or(ContainerError::Truncated("payload"))?;
            let raw = bytes.get(pos..end).ok_or(ContainerError::Truncated("payload"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let m = Matrix::new(e.shape[0], e.shape[1], data).map_err(|err| ContainerError::Tensor {
                name: e.name.clone(),
                msg: err.to_string(),
            })?;
            tensors.push((e.name, m));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(ContainerError::Trailing(bytes.len() - pos));
        }
        Ok(Container {
            meta: manifest.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"problem": "toy", "seed": 7}));
        c.push("a", Matrix::from_rows(&[&[1.0, -0.0, f64::MIN_POSITIVE]]));
        c.push("b", Matrix::from_fn(3, 2, |i, j| (i as f64).powi(3) / (j as f64 + 0.3)));
        c.push("empty", Matrix::zeros(0, 4));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"DONDATA1");
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, m1), (n2, m2)) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(m1.shape(), m2.shape());
            let b1: Vec<u64> = m1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = m2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(manifest["tensors"][1]["shape"], serde_json::json!([3, 2]));
        assert_eq!(bytes.len(), 12 + len + 8 * (3 + 6));
        let first = f64::from_le_bytes(bytes[12 + len..20 + len].try_into().unwrap());
        assert_eq!(first, 1.0);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Container::from_bytes(b"NOTDATA!...."), Err(ContainerError::BadMagic)));
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 3]), Err(ContainerError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Container::from_bytes(&extra), Err(ContainerError::Trailing(1))));
        assert!(sample().get("missing").is_err());
    }
}
