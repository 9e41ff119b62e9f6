//! Binary checkpoints.
//!
//! ```text
//! "UODL" | u32 version | u64 header length | JSON header | f64 blobs
//! ```
//!
//! Integers and floats are little-endian. Blobs follow the header's tensor
//! list in order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ParamSet, Tensor};
use crate::util::write_atomic;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UODL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Number of f64 values in the blob.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub iteration: u64,
    pub seed: u64,
    pub scheme: String,
    pub phase: u32,
    pub teacher_version: Option<u64>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form state that is not a tensor.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Header fields plus named groups of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub scheme: String,
    pub phase: u32,
    pub teacher_version: Option<u64>,
    pub extra: serde_json::Value,
    pub groups: Vec<(String, ParamSet)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&ParamSet> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, p)| p)
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self
            .groups
            .iter()
            .flat_map(|(g, ps)| {
                ps.tensors.iter().map(move |t| TensorEntry {
                    group: g.clone(),
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    len: t.data.len(),
                })
            })
            .collect();
        let header = CheckpointHeader {
            iteration: self.iteration,
            seed: self.seed,
            scheme: self.scheme.clone(),
            phase: self.phase,
            teacher_version: self.teacher_version,
            tensors,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let blob_len: usize = self.groups.iter().map(|(_, p)| p.num_values()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * blob_len);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, ps) in &self.groups {
            for t in &ps.tensors {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decode bytes read from `path` (used only in error messages).
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |k: CheckpointError| Error::checkpoint(path, k);
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(CheckpointError::BadMagic));
        }
        if bytes.len() < 16 {
            return Err(fail(CheckpointError::Truncated("fixed preamble".into())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(CheckpointError::UnsupportedVersion(version)));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        if (body.len() as u64) < hlen {
            return Err(fail(CheckpointError::Truncated(format!(
                "header declares {hlen} bytes, {} available",
                body.len()
            ))));
        }
        let (hbytes, mut blobs) = body.split_at(hlen as usize);
        let header: CheckpointHeader = serde_json::from_slice(hbytes)
            .map_err(|e| fail(CheckpointError::Header(e.to_string())))?;

        let mut groups: Vec<(String, ParamSet)> = Vec::new();
        for t in &header.tensors {
            let product: usize = t.shape.iter().product();
            if product != t.len {
                return Err(fail(CheckpointError::ShapeMismatch(format!(
                    "{}/{}: shape {:?} holds {product} values but the blob has {}",
                    t.group, t.name, t.shape, t.len
                ))));
            }
            let need = t.len * 8;
            if blobs.len() < need {
                return Err(fail(CheckpointError::Truncated(format!(
                    "blob of {}/{} needs {need} bytes, {} left",
                    t.group,
                    t.name,
                    blobs.len()
                ))));
            }
            let (b, rest) = blobs.split_at(need);
            blobs = rest;
            let data = b
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data,
            };
            match groups.iter_mut().find(|(g, _)| *g == t.group) {
                Some((_, ps)) => ps.tensors.push(tensor),
                None => groups.push((t.group.clone(), ParamSet { tensors: vec![tensor] })),
            }
        }
        if !blobs.is_empty() {
            return Err(fail(CheckpointError::Header(format!(
                "{} bytes after the last blob",
                blobs.len()
            ))));
        }
        Ok(Self {
            iteration: header.iteration,
            seed: header.seed,
            scheme: header.scheme,
            phase: header.phase,
            teacher_version: header.teacher_version,
            extra: header.extra,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Load one parameter group and check it against an expected layout.
pub fn load_params(path: &Path, group: &str, expected: &ParamSet) -> Result<ParamSet> {
    let ck = Checkpoint::load(path)?;
    let ps = ck.group(group).ok_or_else(|| {
        Error::checkpoint(path, CheckpointError::Header(format!("no `{group}` parameter group")))
    })?;
    if !ps.same_layout(expected) {
        return Err(Error::checkpoint(
            path,
            CheckpointError::ShapeMismatch(format!(
                "`{group}` does not match the configured architecture"
            )),
        ));
    }
    Ok(ps.clone())
}
