//! `ANOM0001` checkpoint container.
//!
//! Layout: 8-byte magic, 4-byte little-endian header length, UTF-8 JSON
//! header, then every tensor listed in the header as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ANOM0001";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    /// Architecture description; interpreted by the model that wrote it.
    pub architecture: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(
    architecture: serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        architecture,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let payload: usize = tensors.iter().map(|t| t.2.len() * 4).sum();
    let mut out = Vec::with_capacity(12 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                format!("checkpoint tensor {name}"),
                shape,
                data.len(),
            ));
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Vec<f32>>)> {
    if bytes.len() < 12 {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 0,
            reason: format!("file too short ({} bytes)", bytes.len()),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 8,
            reason: format!("header length {hlen} exceeds file"),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| Error::json("checkpoint header", e))?;
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    let payload = &bytes[12 + hlen..];
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected: expected as u64,
            found: payload.len() as u64,
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        off += 4 * n;
        tensors.push(data);
    }
    Ok((header, tensors))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
