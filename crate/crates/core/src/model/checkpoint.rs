//! Checkpoint file format.
//!
//! ```text
//! b"DMST1"                       magic, 5 bytes
//! u64 little-endian              length of the JSON header in bytes
//! JSON header                    {"config": RunConfig, "tensors": [{name, shape, offset}, ...]}
//! payload                        f32 little-endian values, tensors in manifest order
//! ```
//!
//! Offsets are byte offsets into the payload; they start at zero and are
//! contiguous. Values are stored row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::net::Model;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"DMST1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the run configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures `model`; values are rounded to `f32`, the storage precision.
    pub fn from_model(config: &RunConfig, model: &Model) -> Self {
        let tensors = model
            .specs()
            .iter()
            .zip(model.params())
            .map(|(s, t)| (s.name.clone(), t.map(|v| v as f32 as f64)))
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn to_model(&self) -> Result<Model> {
        let specs = super::net::param_specs(&self.config.model);
        if specs.len() != self.tensors.len() {
            return Err(Error::Mismatch(format!(
                "configuration expects {} tensors, checkpoint has {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (s, (name, _)) in specs.iter().zip(&self.tensors) {
            if &s.name != name {
                return Err(Error::Mismatch(format!("expected tensor '{}', found '{name}'", s.name)));
            }
        }
        Model::from_params(
            &self.config.model,
            self.tensors.iter().map(|(_, t)| t.clone()).collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: [t.rows(), t.cols()],
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(13 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(MAGIC.len())]).into_owned();
            return Err(Error::Format(format!("bad magic '{found}', expected 'DMST1'")));
        }
        let len_end = MAGIC.len() + 8;
        if bytes.len() < len_end {
            return Err(Error::Format("file ends inside the header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[MAGIC.len()..len_end].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| len_end.checked_add(h))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "header claims {header_len} bytes but only {} remain",
                    bytes.len() - len_end
                ))
            })?;
        let header: Header = serde_json::from_slice(&bytes[len_end..header_end])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;

        let payload = &bytes[header_end..];
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor '{}' at offset {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            expected_offset += 4 * (e.shape[0] * e.shape[1]) as u64;
        }
        if payload.len() as u64 != expected_offset {
            return Err(Error::Format(format!(
                "payload has {} bytes, manifest requires {expected_offset}",
                payload.len()
            )));
        }
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let start = e.offset as usize;
                let count = e.shape[0] * e.shape[1];
                let data = payload[start..start + 4 * count]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect();
                Ok((e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
