//! On-disk container shared by checkpoints (`.ckpt`) and feature caches
//! (`.fcache`): one line of JSON header, a `\n`, then every tensor as raw
//! little-endian `f64` in manifest order.
//!
//! ```text
//! {"format":"skipt","version":1,"kind":"checkpoint","meta":{..},"tensors":[{"name":..,"shape":[..],"offset":0,..},..]}\n
//! <f64 LE blob>
//! ```
//!
//! Offsets are byte offsets into the blob. Serialization is a pure function
//! of the contents, so reading and re-writing a file reproduces it byte for
//! byte.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const FORMAT: &str = "skipt";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    format: String,
    version: u32,
    kind: String,
    meta: M,
    tensors: Vec<TensorEntry>,
}

/// A tensor to be written, with an optional trainable flag.
pub struct TensorRef<'a> {
    pub name: String,
    pub value: &'a Array,
    pub trainable: Option<bool>,
}

pub fn encode<M: Serialize>(kind: &str, meta: &M, tensors: &[TensorRef<'_>]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.value.shape().to_vec(),
            offset,
            trainable: t.trainable,
        });
        offset += 8 * t.value.len() as u64;
    }
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        meta,
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset as usize);
    for t in tensors {
        for v in t.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<(M, Vec<(TensorEntry, Array)>)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let header: Header<M> = serde_json::from_slice(&bytes[..split])?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    if header.kind != kind {
        return Err(Error::Format(format!("expected a {kind}, found a {}", header.kind)));
    }
    let blob = &bytes[split + 1..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor `{}` at unexpected offset {}",
                e.name, e.offset
            )));
        }
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > blob.len() {
            return Err(Error::Format(format!("tensor `{}` runs past end of blob", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        expected_offset = end as u64;
        let array = Array::new(e.shape.clone(), data)?;
        tensors.push((e, array));
    }
    if expected_offset as usize != blob.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            blob.len() - expected_offset as usize
        )));
    }
    Ok((header.meta, tensors))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
