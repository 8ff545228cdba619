//! Self-describing checkpoint file.
//!
//! Layout: the 8-byte magic `CADACKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f32` in header order. The header records the
//! config hash, the shared-parameter alias table, each tensor's name and shape,
//! and a SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CadaError, Result};

const MAGIC: &[u8; 8] = b"CADACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Effective configuration text that produced the weights.
    pub config: String,
    pub step: u64,
    /// `(alias, canonical)` pairs of parameters that share storage.
    pub aliases: Vec<(String, String)>,
    pub tensors: Vec<NamedArray>,
    pub extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: String,
    step: u64,
    aliases: Vec<(String, String)>,
    tensors: Vec<(String, Vec<usize>)>,
    payload_sha256: String,
    extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.tensors.iter().map(|t| t.data.len() * 4).sum());
        for t in &self.tensors {
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            step: self.step,
            aliases: self.aliases.clone(),
            tensors: self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            extra: self.extra.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| CadaError::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CadaError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| CadaError::Checkpoint(format!("corrupt header: {e}")))?;
        let payload = &body[hlen..];
        let expected: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
        if payload.len() != expected {
            return Err(CadaError::Checkpoint(format!(
                "payload holds {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut off = 0;
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let data = payload[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * n;
            tensors.push(NamedArray { name, shape, data });
        }
        Ok(Checkpoint {
            config_hash: header.config_hash,
            config: header.config,
            step: header.step,
            aliases: header.aliases,
            tensors,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CadaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CadaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: "abc".into(),
            config: "model.heads=4\n".into(),
            step: 7,
            aliases: vec![("decoder.w".into(), "text.w".into())],
            tensors: vec![
                NamedArray { name: "text.w".into(), shape: vec![2, 2], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-9] },
                NamedArray { name: "b".into(), shape: vec![1], data: vec![f32::MAX] },
            ],
            extra: BTreeMap::from([("k".to_string(), "v".to_string())]),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let bits = |c: &Checkpoint| c.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CadaError::Checkpoint(_))));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage-garbage-garbage").is_err());
    }
}
