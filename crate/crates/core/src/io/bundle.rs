// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor container.
//!
//! Layout: one UTF-8 JSON header line
//! `{"tensors":[{"name":…,"dtype":"f64"|"f32","shape":[…],"offset":…}]}`,
//! a newline, then the little-endian payloads. Offsets count from the first
//! payload byte.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn dtype(&self) -> &'static str {
        match self {
            Self::F64(_) => "f64",
            Self::F32(_) => "f32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn byte_len(&self) -> usize {
        match self {
            Self::F64(v) => v.len() * 8,
            Self::F32(v) => v.len() * 4,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Self::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Self::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// Bitwise equality, so NaN payloads and signed zeros round-trip observably.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::F64(a), Self::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Self::F32(a), Self::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor '{name}' of shape {shape:?} holds {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    /// Two-dimensional `f64` tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match (&self.data, self.shape.as_slice()) {
            (TensorData::F64(v), [r, c]) => Matrix::new(*r, *c, v.clone()),
            _ => Err(Error::Shape(format!(
                "tensor '{}' is not a 2-D f64 matrix ({} {:?})",
                self.name,
                self.data.dtype(),
                self.shape
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    tensors: Vec<Tensor>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(Error::Bundle(format!(
                "duplicate tensor name '{}'",
                tensor.name
            )));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.insert(Tensor::from_matrix(name, m))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Bundle(format!("no tensor named '{name}'")))?
            .to_matrix()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(Entry {
                name: t.name.clone(),
                dtype: t.data.dtype().to_string(),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.data.byte_len();
        }
        let mut out = serde_json::to_vec(&Header { tensors: entries })?;
        out.push(b'\n');
        out.reserve(offset);
        self.tensors.iter().for_each(|t| t.data.write_le(&mut out));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Bundle("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Bundle(format!("header: {e}")))?;
        let payload = &bytes[split + 1..];
        let mut seen = HashSet::new();
        let mut bundle = Self::new();
        for e in header.tensors {
            if !seen.insert(e.name.clone()) {
                return Err(Error::Bundle(format!("duplicate tensor name '{}'", e.name)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Bundle(format!("tensor '{}' shape overflows", e.name)))?;
            let width = match e.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => {
                    return Err(Error::Bundle(format!(
                        "tensor '{}' has unknown dtype '{other}'",
                        e.name
                    )))
                }
            };
            let end = count
                .checked_mul(width)
                .and_then(|n| n.checked_add(e.offset))
                .filter(|end| *end <= payload.len())
                .ok_or_else(|| {
                    Error::Bundle(format!(
                        "tensor '{}' is truncated: needs {} bytes at offset {}, payload has {}",
                        e.name,
                        count.saturating_mul(width),
                        e.offset,
                        payload.len()
                    ))
                })?;
            let raw = &payload[e.offset..end];
            let data = if width == 8 {
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                )
            } else {
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                        .collect(),
                )
            };
            bundle.tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(bundle)
    }
}

pub fn save_bundle(bundle: &TensorBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bundle.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<TensorBundle> {
    let path = path.as_ref();
    TensorBundle::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorBundle {
        let mut b = TensorBundle::new();
        b.insert(
            Tensor::new(
                "a",
                vec![2, 2],
                TensorData::F64(vec![1.0, -0.0, f64::NAN, 3.5]),
            )
            .unwrap(),
        )
        .unwrap();
        b.insert(Tensor::new("b", vec![3], TensorData::F32(vec![1.5, 2.0, -7.25])).unwrap())
            .unwrap();
        b
    }

    #[test]
    fn empty_bundle_is_header_only() {
        let bytes = TensorBundle::new().to_bytes().unwrap();
        assert_eq!(bytes, b"{\"tensors\":[]}\n");
        assert!(TensorBundle::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let b = sample();
        assert_eq!(TensorBundle::from_bytes(&b.to_bytes().unwrap()).unwrap(), b);
    }

    #[test]
    fn header_lists_offsets() {
        let bytes = sample().to_bytes().unwrap();
        let line =
            std::str::from_utf8(&bytes[..bytes.iter().position(|b| *b == b'\n').unwrap()]).unwrap();
        assert_eq!(
            line,
            r#"{"tensors":[{"name":"a","dtype":"f64","shape":[2,2],"offset":0},{"name":"b","dtype":"f32","shape":[3],"offset":32}]}"#
        );
        assert_eq!(bytes.len(), line.len() + 1 + 32 + 12);
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = sample().to_bytes().unwrap();
        let err = TensorBundle::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(TensorBundle::from_bytes(b"{\"tensors\":[]}").is_err());
        assert!(TensorBundle::from_bytes(b"not json\n").is_err());
        let bad_dtype = br#"{"tensors":[{"name":"a","dtype":"i8","shape":[1],"offset":0}]}
x"#;
        assert!(TensorBundle::from_bytes(bad_dtype).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut b = sample();
        assert!(b
            .insert(Tensor::from_matrix("a", &Matrix::zeros(1, 1)))
            .is_err());
        let dup = br#"{"tensors":[{"name":"a","dtype":"f32","shape":[1],"offset":0},{"name":"a","dtype":"f32","shape":[1],"offset":0}]}
abcd"#;
        assert!(matches!(
            TensorBundle::from_bytes(dup),
            Err(Error::Bundle(_))
        ));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new("x", vec![2, 2], TensorData::F32(vec![0.0; 3])).is_err());
    }
}
