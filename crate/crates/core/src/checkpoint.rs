//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter tensor as little-endian `f64` in
//! [`Parameterized`] order. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};
use crate::netops::Parameterized;

pub const MAGIC: &[u8; 8] = b"MBLADECK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub num_labels: usize,
    pub vocab_len: usize,
    pub vocab_hash: String,
    pub labels_hash: String,
    pub has_untied: bool,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

/// Write `magic | version | header length | header | body`.
pub(crate) fn frame(magic: &[u8; 8], version: u32, header: &[u8], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + header.len() + body.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(body);
    out
}

/// Split a framed file into header and body after checking magic and version.
pub(crate) fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 8], version: u32, what: &str) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Format(format!(
            "{what} format version {found}, expected {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[20..];
    if rest.len() < len {
        return Err(Error::Format(format!("truncated {what} header")));
    }
    Ok(rest.split_at(len))
}

pub(crate) fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f64s(bytes: &[u8], dst: &mut [f64]) {
    for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
        *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocab_hash: String, labels_hash: String) -> Self {
        let tensors = (0..params.tensor_count())
            .map(|i| TensorInfo {
                name: params.tensor_name(i),
                shape: params.tensor(i).shape().to_vec(),
            })
            .collect();
        let header = CheckpointHeader {
            architecture: params.architecture(),
            num_labels: params.num_labels(),
            vocab_len: params.vocab_len(),
            vocab_hash,
            labels_hash,
            has_untied: params.is_finetuned(),
            tensors,
        };
        Checkpoint { header, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let p = &self.params;
        let mut body = Vec::new();
        for i in 0..p.tensor_count() {
            push_f64s(&mut body, p.tensor(i).data());
        }
        Ok(frame(MAGIC, VERSION, &header, &body))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = unframe(bytes, MAGIC, VERSION, "checkpoint")?;
        let header: CheckpointHeader = serde_json::from_slice(header)?;
        header.architecture.validate()?;
        let mut params = ModelParams::zeros(&header.architecture, header.vocab_len, header.num_labels);
        if header.has_untied {
            params.init_finetune();
        }
        if params.tensor_count() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, architecture implies {}",
                header.tensors.len(),
                params.tensor_count()
            )));
        }
        let mut offset = 0;
        for (i, info) in header.tensors.iter().enumerate() {
            let t = params.tensor_mut(i);
            if t.shape() != info.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    info.name,
                    info.shape,
                    t.shape()
                )));
            }
            let n = t.len() * 8;
            let chunk = body
                .get(offset..offset + n)
                .ok_or_else(|| Error::Format(format!("truncated tensor {}", info.name)))?;
            read_f64s(chunk, t.data_mut());
            offset += n;
        }
        if offset != body.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Checkpoint { header, params })
    }

    /// Write the checkpoint and return the SHA-256 of the file bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Load a checkpoint and the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path)?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        Ok((ckpt, sha256_hex(&bytes)))
    }

    /// Fail unless the checkpoint was trained against these artifacts.
    pub fn verify(&self, vocab_hash: &str, labels_hash: &str) -> Result<()> {
        if self.header.vocab_hash != vocab_hash {
            return Err(Error::HashMismatch {
                what: "vocabulary",
                expected: self.header.vocab_hash.clone(),
                found: vocab_hash.to_string(),
            });
        }
        if self.header.labels_hash != labels_hash {
            return Err(Error::HashMismatch {
                what: "label space",
                expected: self.header.labels_hash.clone(),
                found: labels_hash.to_string(),
            });
        }
        Ok(())
    }
}
