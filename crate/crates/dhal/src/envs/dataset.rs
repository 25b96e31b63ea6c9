//! Transition dataset format.
//!
//! Layout: one JSON header line, then little-endian f32 records
//! `[obs | action | next_obs | contact | done | true_mode]` in episode-major
//! order. true_mode is -1 when the simulator defines none. The header carries
//! a sha256 checksum of the body, verified on load.

use crate::error::{DhalError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const DATA_MAGIC: &str = "DHAL-DATA-1";

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: Vec<f32>,
    pub next_obs: Vec<f32>,
    pub contacts: Vec<bool>,
    pub done: bool,
    pub true_mode: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetHeader {
    pub version: String,
    pub env: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub contact_dim: usize,
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub checksum: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn record_len(header: &DatasetHeader) -> usize {
        2 * header.obs_dim + header.act_dim + header.contact_dim + 2
    }

    pub fn labeled(&self) -> bool {
        self.transitions.iter().all(|t| t.true_mode.is_some())
    }
}

fn encode_body(header: &DatasetHeader, transitions: &[Transition]) -> Result<Vec<u8>> {
    let mut body = Vec::with_capacity(transitions.len() * Dataset::record_len(header) * 4);
    let push = |v: f32, body: &mut Vec<u8>| body.extend_from_slice(&v.to_le_bytes());
    for (i, t) in transitions.iter().enumerate() {
        if t.obs.len() != header.obs_dim
            || t.next_obs.len() != header.obs_dim
            || t.action.len() != header.act_dim
            || t.contacts.len() != header.contact_dim
        {
            return Err(DhalError::Data(format!("transition {i} does not match header dims")));
        }
        for &v in t.obs.iter().chain(&t.action).chain(&t.next_obs) {
            push(v, &mut body);
        }
        for &c in &t.contacts {
            push(if c { 1.0 } else { 0.0 }, &mut body);
        }
        push(if t.done { 1.0 } else { 0.0 }, &mut body);
        push(t.true_mode.map(|m| m as f32).unwrap_or(-1.0), &mut body);
    }
    Ok(body)
}

pub fn save(header: &DatasetHeader, transitions: &[Transition], path: &Path) -> Result<()> {
    let body = encode_body(header, transitions)?;
    let mut header = header.clone();
    header.version = DATA_MAGIC.to_string();
    header.checksum = {
        let mut h = Sha256::new();
        h.update(&body);
        format!("{:x}", h.finalize())
    };
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    f.write_all(&body)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut header_line = String::new();
    r.read_line(&mut header_line)?;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| DhalError::Data(format!("bad dataset header: {e}")))?;
    if header.version != DATA_MAGIC {
        return Err(DhalError::Data(format!("bad dataset version {:?}", header.version)));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut h = Sha256::new();
    h.update(&body);
    if format!("{:x}", h.finalize()) != header.checksum {
        return Err(DhalError::Data("dataset checksum mismatch".into()));
    }
    let rec = Dataset::record_len(&header);
    if body.len() % (rec * 4) != 0 {
        return Err(DhalError::Data("dataset body not a whole number of records".into()));
    }
    let floats: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut transitions = Vec::with_capacity(floats.len() / rec);
    for chunk in floats.chunks_exact(rec) {
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| {
            let s = chunk[*at..*at + n].to_vec();
            *at += n;
            s
        };
        let obs = take(&mut at, header.obs_dim);
        let action = take(&mut at, header.act_dim);
        let next_obs = take(&mut at, header.obs_dim);
        let contacts = take(&mut at, header.contact_dim).iter().map(|&v| v > 0.5).collect();
        let done = chunk[at] > 0.5;
        let mode = chunk[at + 1];
        transitions.push(Transition {
            obs,
            action,
            next_obs,
            contacts,
            done,
            true_mode: if mode < 0.0 { None } else { Some(mode as usize) },
        });
    }
    Ok(Dataset { header, transitions })
}

pub fn body_checksum(path: &Path) -> Result<String> {
    let data = load(path)?;
    Ok(data.header.checksum)
}
