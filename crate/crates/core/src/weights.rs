//! Versioned single-file container for network parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"EPSAMWT\0"
//! version  u32       FORMAT_VERSION
//! hlen     u64       length of the JSON header in bytes
//! header   hlen      UTF-8 JSON: kind, architecture, hyper, meta, tensors[{name, shape}]
//! payload  ...       f64 values of every tensor, header order, row-major
//! ```

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::Params;

pub const MAGIC: &[u8; 8] = b"EPSAMWT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    architecture: Value,
    hyper: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// A parameter set plus the JSON records describing how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub kind: String,
    pub architecture: Value,
    pub hyper: Value,
    pub meta: Value,
    pub params: Params,
}

impl WeightsFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            architecture: self.architecture.clone(),
            hyper: self.hyper.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.values)
                .map(|(name, v)| TensorEntry {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.params.values {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut payload = body[hlen..].chunks_exact(8);
        let mut params = Params::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f64> = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.len() != n {
                return Err(Error::Format(format!("truncated tensor `{}`", entry.name)));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            params.push(entry.name, arr);
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind: header.kind,
            architecture: header.architecture,
            hyper: header.hyper,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected `{kind}` weights, found `{}`",
                self.kind
            )))
        }
    }
}
