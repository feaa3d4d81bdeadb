//! Checkpoint tensor container.
//!
//! Layout:
//!
//! ```text
//! u64 LE   header length in bytes
//! [u8]     JSON header: [{"name","rows","cols","dtype","byte_offset"}, ...]
//! [u8]     little-endian IEEE-754 blobs, `byte_offset` relative to here
//! ```
//!
//! Tensors are held as `f64` in memory; an `f32` entry is widened on read
//! and narrowed on write, which is exact for values that came from an `f32`
//! file, so read-then-write reproduces the original bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: DType,
    byte_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub value: Matrix,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: DType, value: Matrix) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            dtype,
            value,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.value)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let m = self.get(name)?;
        if m.shape() != (rows, cols) {
            return Err(Error::Format(format!(
                "tensor {name:?} is {:?}, expected {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
        Ok(m.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            header.push(HeaderEntry {
                name: t.name.clone(),
                rows: t.value.rows(),
                cols: t.value.cols(),
                dtype: t.dtype,
                byte_offset: offset,
            });
            offset += t.value.len() * t.dtype.width();
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match t.dtype {
                DType::F32 => {
                    for &v in t.value.as_slice() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in t.value.as_slice() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("truncated header length".into()))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Vec<HeaderEntry> = serde_json::from_slice(json)?;
        let blob = &bytes[8 + hlen..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.len());
        for e in header {
            let n = e.rows * e.cols;
            let w = e.dtype.width();
            if e.byte_offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor {:?} at offset {}, expected {}",
                    e.name, e.byte_offset, expected_offset
                )));
            }
            let raw = blob
                .get(e.byte_offset..e.byte_offset + n * w)
                .ok_or_else(|| Error::Format(format!("tensor {:?} truncated", e.name)))?;
            let data: Vec<f64> = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            expected_offset += n * w;
            tensors.push(NamedTensor {
                name: e.name,
                dtype: e.dtype,
                value: Matrix::from_vec(e.rows, e.cols, data)?,
            });
        }
        if expected_offset != blob.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                blob.len() - expected_offset
            )));
        }
        Ok(TensorFile { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_as_documented() {
        let mut f = TensorFile::new();
        f.push("a", DType::F32, Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        f.push("b", DType::F64, Matrix::from_rows(&[[3.0], [4.0]]).unwrap());
        let bytes = f.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header[1]["byte_offset"], 8);
        assert_eq!(header[0]["dtype"], "f32");
        assert_eq!(bytes.len(), 8 + hlen + 2 * 4 + 2 * 8);
        assert_eq!(&bytes[8 + hlen..8 + hlen + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut f = TensorFile::new();
        f.push("a", DType::F64, Matrix::filled(2, 2, 1.5));
        let bytes = f.to_bytes().unwrap();
        assert!(matches!(
            TensorFile::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(TensorFile::from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn missing_tensor_is_reported() {
        assert!(matches!(TensorFile::new().get("w"), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn byte_exact_round_trip(
            vals in prop::collection::vec(-1e6f64..1e6, 1..40),
            cols in 1usize..5,
            wide in any::<bool>(),
        ) {
            let n = vals.len() / cols * cols;
            prop_assume!(n > 0);
            let m = Matrix::from_vec(n / cols, cols, vals[..n].to_vec()).unwrap();
            let mut f = TensorFile::new();
            f.push("w", if wide { DType::F64 } else { DType::F32 }, m.clone());
            f.push("bias", DType::F32, Matrix::filled(1, cols, 0.25));
            let bytes = f.to_bytes().unwrap();
            let back = TensorFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            if wide {
                prop_assert_eq!(back.get("w").unwrap(), &m);
            }
        }
    }
}
