//! Tensor container file: an 8-byte little-endian header length, a JSON
//! header (`config` plus a tensor index of name/shape/offset), then the raw
//! little-endian f32 payload. Offsets are relative to the start of the
//! payload and tensors are laid out back to back in index order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::{f32s_from_le_bytes, f32s_to_le_bytes};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "steerkit-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn take(&mut self, name: &str) -> Option<NamedTensor> {
        let idx = self.tensors.iter().position(|t| t.name == name)?;
        Some(self.tensors.remove(idx))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut index = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            index.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.data.len() as u64;
        }
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: index,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in &self.tensors {
            out.extend_from_slice(&f32s_to_le_bytes(&t.data));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("file shorter than header length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() < header_len {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Format(format!("header json: {e}")))?;
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let payload = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * numel;
            if end > payload.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} declares {:?} ({} bytes at offset {}) but payload has {} bytes",
                    entry.name,
                    entry.shape,
                    4 * numel,
                    start,
                    payload.len()
                )));
            }
            let data = f32s_from_le_bytes(&payload[start..end]).expect("multiple of 4");
            tensors.push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        Ok(Self {
            config: header.config,
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }
}

/// Reads only the JSON config from a container, without decoding tensors.
pub fn read_config(path: &Path) -> Result<serde_json::Value> {
    Ok(TensorFile::read(path)?.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        TensorFile {
            config: serde_json::json!({"a": 1}),
            tensors: vec![
                NamedTensor::new("x", vec![2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]),
                NamedTensor::new("y", vec![3], vec![0.1, 0.2, 0.3]),
            ],
        }
    }

    #[test]
    fn byte_exact_round_trip() {
        let bytes = sample().to_bytes();
        let parsed = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, sample());
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn truncated_payload_is_shape_error() {
        let bytes = sample().to_bytes();
        let err = TensorFile::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn garbage_is_format_error() {
        assert!(matches!(
            TensorFile::from_bytes(b"\x02\0\0\0\0\0\0\0{]").unwrap_err(),
            Error::Format(_)
        ));
    }
}
