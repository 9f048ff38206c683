//! Binary checkpoint: magic `EMCK`, `u32` version, `u64` header length, a
//! JSON header (model config plus tensor names and shapes), then every
//! tensor's values as little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionError, ModelConfig};
use crate::numkit::{ParamStore, Tensor};
use crate::text::sha256_hex;

const MAGIC: &[u8; 4] = b"EMCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Parameters together with the config they belong to.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn format_err(msg: impl Into<String>) -> FusionError {
    FusionError::Format(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            tensors: self.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Parses and checks that names and shapes match the embedded config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FusionError> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| format_err("truncated"))?;
        let json = body.get(..len).ok_or_else(|| format_err("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| format_err(format!("bad header: {e}")))?;
        header.config.validate()?;
        let layout = header.config.parameter_layout();
        let matches = layout.len() == header.tensors.len()
            && layout
                .iter()
                .zip(&header.tensors)
                .all(|((name, r, c, _), (n, shape))| name == n && shape == &[*r, *c]);
        if !matches {
            return Err(format_err("tensor list does not match the model config"));
        }
        let mut data = body[len..].chunks_exact(8);
        let expected: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if data.len() != expected || !data.remainder().is_empty() {
            return Err(format_err(format!(
                "expected {expected} values, found {} bytes",
                body.len() - len
            )));
        }
        let mut params = ParamStore::new();
        for (name, shape) in header.tensors {
            let n = shape.iter().product();
            let values: Vec<f64> = data
                .by_ref()
                .take(n)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, values)?;
            if !t.is_finite() {
                return Err(format_err(format!("tensor `{name}` has non-finite values")));
            }
            params.insert(name, t)?;
        }
        Ok(Checkpoint {
            config: header.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        fs::write(path, self.to_bytes()).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let bytes = fs::read(path).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
