//! Versioned binary container of named `f32` arrays plus a JSON header.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then each tensor's data as little-endian `f32` in index order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::layers::ParamMap;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TLAPSE\x00\x01";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    /// Format tag such as `timelapse-model/v1`; readers require an exact match.
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: ParamMap<f32>,
}

impl Container {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let header = Header {
            format: self.format.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(k, v)| Entry { name: k.clone(), shape: v.shape().to_vec() }).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(MAGIC)?;
        put(&(header.len() as u64).to_le_bytes())?;
        put(&header)?;
        for t in self.tensors.values() {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            put(&buf)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a container, rejecting any format tag other than `expected_format`.
    pub fn read(path: &Path, expected_format: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a timelapse container"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::format(path, e.to_string()))?;
        if header.format != expected_format {
            return Err(Error::CheckpointVersion { expected: expected_format.to_string(), found: header.format });
        }
        let mut offset = body;
        let mut tensors = ParamMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = offset + n * 4;
            if end > bytes.len() {
                return Err(Error::format(path, format!("truncated data for {}", e.name)));
            }
            let data = bytes[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            offset = end;
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        if offset != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Container { format: header.format, meta: header.meta, tensors })
    }
}
