//! Detector snapshots and their binary container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as little-endian `f32`.

use std::fs;
use std::path::Path;

use erd_core::detector::{HeadConfig, TinyDet};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, ErdError, Result};

const MAGIC: &[u8; 8] = b"ERDSNAP\0";
const VERSION: u32 = 1;

/// Full parameter state of a detector after some step.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSnapshot {
    pub head: HeadConfig,
    pub image_size: u32,
    pub step: usize,
    pub categories_seen: Vec<usize>,
    pub params: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    head: HeadConfig,
    image_size: u32,
    step: usize,
    categories_seen: Vec<usize>,
    param_count: usize,
}

impl DetectorSnapshot {
    pub fn network(&self) -> Result<TinyDet> {
        let net = TinyDet::new(self.head.clone(), self.image_size)?;
        if net.param_count() != self.params.len() {
            return Err(ErdError::SnapshotMismatch(format!(
                "{} parameters stored, architecture needs {}",
                self.params.len(),
                net.param_count()
            )));
        }
        Ok(net)
    }

    /// Errors unless the snapshot was built for exactly this architecture.
    pub fn check_compatible(&self, head: &HeadConfig, image_size: u32) -> Result<()> {
        if &self.head != head || self.image_size != image_size {
            return Err(ErdError::SnapshotMismatch(format!(
                "snapshot has {:?} at {}px, expected {:?} at {}px",
                self.head, self.image_size, head, image_size
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            head: self.head.clone(),
            image_size: self.image_size,
            step: self.step,
            categories_seen: self.categories_seen.clone(),
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| format_err(path, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a detector snapshot"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported snapshot version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).unwrap_or_default();
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let data = &body[header_len..];
        if data.len() != 4 * header.param_count {
            return Err(bad(&format!("expected {} parameters, found {} bytes", header.param_count, data.len())));
        }
        let params = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let snap = DetectorSnapshot {
            head: header.head,
            image_size: header.image_size,
            step: header.step,
            categories_seen: header.categories_seen,
            params,
        };
        snap.network()?;
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads a snapshot and rejects it unless its architecture matches.
    pub fn load_expecting(path: &Path, head: &HeadConfig, image_size: u32) -> Result<Self> {
        let snap = Self::load(path)?;
        snap.check_compatible(head, image_size)?;
        Ok(snap)
    }
}
