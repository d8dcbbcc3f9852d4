//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"STEGCKPT"
//! 8       4     u32    container version (currently 1)
//! 12      8     u64    header length H in bytes
//! 20      H     UTF-8 JSON header:
//!                 { "format": <tag>, "meta": <object>,
//!                   "tensors": [ { "name", "shape", "offset", "len" }, ... ] }
//! 20+H    ...   payload: f32 little-endian values; tensor i occupies
//!               elements [offset, offset + len) of the payload
//! ```
//!
//! `format` names the artifact (`"oracle"`, `"attack"`, `"attack-train-state"`),
//! `meta` carries architecture hyperparameters and any scalar state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvStack, Params};

pub const MAGIC: &[u8; 8] = b"STEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(format: &str, meta: serde_json::Value) -> Self {
        Self {
            format: format.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn expect_format(&self, format: &str) -> Result<()> {
        if self.format != format {
            return Err(Error::Format(format!(
                "expected a `{format}` checkpoint, found `{}`",
                self.format
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format: self.format.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Format(format!("tensor `{}` shape/len mismatch", e.name)));
            }
            let raw = payload
                .get(4 * e.offset..4 * (e.offset + e.len))
                .ok_or_else(|| Error::Format(format!("tensor `{}` truncated", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            format: header.format,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Stores every tensor of `params` under `prefix.<index>`.
    pub fn push_params<P: Params<f32>>(&mut self, prefix: &str, params: &P) {
        for (i, t) in params.tensors().into_iter().enumerate() {
            self.push(format!("{prefix}.{i}"), vec![t.len()], t.to_vec());
        }
    }

    /// Fills `params` (already shaped by its architecture) from `prefix.<index>`.
    pub fn read_params<P: Params<f32>>(&self, prefix: &str, params: &mut P) -> Result<()> {
        for (i, t) in params.tensors_mut().into_iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let src = self.tensor(&name)?;
            if src.data.len() != t.len() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has {} values, architecture expects {}",
                    src.data.len(),
                    t.len()
                )));
            }
            t.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Stores a conv stack with per-layer `[out, in, k, k]` weight shapes.
    pub fn push_stack(&mut self, prefix: &str, stack: &ConvStack<f32>) {
        for (i, l) in stack.layers.iter().enumerate() {
            let g = l.geom;
            self.push(
                format!("{prefix}.{i}.weight"),
                vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                l.weight.clone(),
            );
            self.push(format!("{prefix}.{i}.bias"), vec![g.out_channels], l.bias.clone());
        }
    }

    pub fn read_stack(&self, prefix: &str, stack: &mut ConvStack<f32>) -> Result<()> {
        for (i, l) in stack.layers.iter_mut().enumerate() {
            for (suffix, dst) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
                let name = format!("{prefix}.{i}.{suffix}");
                let src = self.tensor(&name)?;
                if src.data.len() != dst.len() {
                    return Err(Error::Format(format!(
                        "tensor `{name}` has {} values, architecture expects {}",
                        src.data.len(),
                        dst.len()
                    )));
                }
                dst.copy_from_slice(&src.data);
            }
        }
        Ok(())
    }
}
