//! Parameter file format: an 8-byte little-endian header length, a JSON
//! header listing `(name, shape, offset)` per tensor, then the tensors as
//! contiguous little-endian `f32` arrays. Offsets are in bytes from the start
//! of the data section.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn write_tensors(
    path: &Path,
    tensors: &[(String, Tensor<f32>)],
    metadata: serde_json::Value,
) -> Result<()> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() * 4;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        tensors: entries,
        metadata,
    })?;
    let mut buf = Vec::with_capacity(8 + header.len() + offset);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<(Vec<(String, Tensor<f32>)>, serde_json::Value)> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(bad("file shorter than header length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(hlen)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[8..data_start])?;
    let data = &bytes[data_start..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > data.len() {
            return Err(bad(format!("tensor {} extends past end of file", e.name)));
        }
        let values = data[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((e.name, Tensor::new(e.shape, values)?));
    }
    Ok((out, header.metadata))
}
