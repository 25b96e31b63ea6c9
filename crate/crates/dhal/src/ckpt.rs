//! Parameter checkpoint format.
//!
//! Layout: a magic line `DHAL-CKPT-1`, one JSON manifest line, then the raw
//! little-endian f32 payload. Parameters are concatenated in lexicographic
//! name order; each manifest entry carries a sha256 checksum of its byte
//! range, verified on load.

use crate::error::{DhalError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &str = "DHAL-CKPT-1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
    checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    params: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in store.iter() {
        let offset = blob.len();
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            byte_offset: offset,
            checksum: sha256_hex(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest { version: CKPT_MAGIC.to_string(), params: entries };
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{CKPT_MAGIC}")?;
    writeln!(f, "{}", serde_json::to_string(&manifest).expect("manifest serializes"))?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = String::new();
    r.read_line(&mut magic)?;
    if magic.trim_end() != CKPT_MAGIC {
        return Err(DhalError::Data(format!("bad checkpoint magic: {:?}", magic.trim_end())));
    }
    let mut manifest_line = String::new();
    r.read_line(&mut manifest_line)?;
    let manifest: Manifest = serde_json::from_str(&manifest_line)
        .map_err(|e| DhalError::Data(format!("bad checkpoint manifest: {e}")))?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut store = ParamStore::new();
    for e in &manifest.params {
        let count: usize = e.shape.iter().product();
        let end = e.byte_offset + count * 4;
        if end > blob.len() {
            return Err(DhalError::Data(format!("checkpoint truncated at {}", e.name)));
        }
        let bytes = &blob[e.byte_offset..end];
        if sha256_hex(bytes) != e.checksum {
            return Err(DhalError::Data(format!("checksum mismatch for {}", e.name)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(store)
}
