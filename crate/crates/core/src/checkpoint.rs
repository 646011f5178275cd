//! Self-describing checkpoint files: backbone config plus every parameter
//! tensor keyed by its stable layout name. Array payloads are raw
//! little-endian f32 bytes (base64), so load(save(theta)) is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, ParamStore};
use crate::error::{Error, Result};

const FORMAT: &str = "tsseg-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    role: String,
    config: BackboneConfig,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

/// A trained model: architecture config plus parameter values.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    /// Which side of the framework produced this ("teacher" or "student").
    pub role: String,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: BackboneConfig, role: impl Into<String>, params: ParamStore<f32>) -> Self {
        Self {
            config,
            role: role.into(),
            params,
        }
    }

    pub fn backbone(&self) -> Result<Backbone> {
        Backbone::new(self.config.clone())
    }

    fn to_file_repr(&self) -> Result<CheckpointFile> {
        let backbone = self.backbone()?;
        let layout = backbone.layout();
        if self.params.len() != layout.total_len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match layout {}",
                self.params.len(),
                layout.total_len()
            )));
        }
        let params = layout
            .entries()
            .iter()
            .map(|e| {
                let slice = &self.params.data()[e.offset..e.offset + e.len];
                let mut bytes = Vec::with_capacity(slice.len() * 4);
                for v in slice {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                ParamRecord {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: B64.encode(bytes),
                }
            })
            .collect();
        Ok(CheckpointFile {
            format: FORMAT.to_string(),
            version: VERSION,
            role: self.role.clone(),
            config: self.config.clone(),
            params,
        })
    }

    /// Canonical serialized bytes (what `save` writes).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.to_file_repr()?)?)
    }

    /// Hex SHA-256 of the canonical bytes; identifies the checkpoint in
    /// caches and reproducibility checks.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Writes the checkpoint and returns its digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads and validates a checkpoint; returns it with the file digest.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let digest = sha256_hex(&bytes);
        let file: CheckpointFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}/{}",
                file.format, file.version
            )));
        }
        let backbone = Backbone::new(file.config.clone())?;
        let layout = backbone.layout();
        if file.params.len() != layout.entries().len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.entries().len(),
                file.params.len()
            )));
        }
        let mut data = vec![0f32; layout.total_len()];
        for (entry, record) in layout.entries().iter().zip(file.params.iter()) {
            if entry.name != record.name || entry.shape != record.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    entry.name, entry.shape, record.name, record.shape
                )));
            }
            let bytes = B64
                .decode(&record.data)
                .map_err(|e| Error::Checkpoint(format!("bad payload for {}: {e}", record.name)))?;
            if bytes.len() != entry.len * 4 {
                return Err(Error::Checkpoint(format!(
                    "payload length {} != {} for {}",
                    bytes.len(),
                    entry.len * 4,
                    record.name
                )));
            }
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                data[entry.offset + i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        let params = ParamStore::from_vec(layout, data)
            .ok_or_else(|| Error::Checkpoint("layout/data length mismatch".into()))?;
        Ok((
            Self {
                config: file.config,
                role: file.role,
                params,
            },
            digest,
        ))
    }
}

pub(crate) fn b64_f32(data: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn b64_to_f32(s: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::InvalidConfig(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidConfig("f32 payload length not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub(crate) fn b64_u8(data: &[u8]) -> String {
    B64.encode(data)
}

pub(crate) fn b64_to_u8(s: &str) -> Result<Vec<u8>> {
    B64.decode(s)
        .map_err(|e| Error::InvalidConfig(format!("bad base64 payload: {e}")))
}

/// Hex-encoded SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Digest of raw parameter values (little-endian f32 bytes).
pub fn params_digest(params: &ParamStore<f32>) -> String {
    let mut bytes = Vec::with_capacity(params.len() * 4);
    for v in params.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            in_channels: 2,
            num_classes: 3,
            base_width: 4,
            depth: 2,
            dilation_rates: vec![1, 2],
            token_dim: 8,
            heads: 2,
            ff_mult: 2,
            dropout_rate: 0.1,
            input_hw: (16, 16),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = tiny_config();
        let net = Backbone::new(cfg.clone()).unwrap();
        let params = net.init_params::<f32>(99);
        let ckpt = Checkpoint::new(cfg, "teacher", params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let digest = ckpt.save(&path).unwrap();
        let (loaded, digest2) = Checkpoint::load(&path).unwrap();
        assert_eq!(digest, digest2);
        assert_eq!(loaded.role, "teacher");
        assert_eq!(loaded.config, ckpt.config);
        let a: &[f32] = ckpt.params.data();
        let b: &[f32] = loaded.params.data();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"{ not a checkpoint").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn digest_changes_with_parameters() {
        let cfg = tiny_config();
        let net = Backbone::new(cfg.clone()).unwrap();
        let a = Checkpoint::new(cfg.clone(), "teacher", net.init_params::<f32>(1));
        let b = Checkpoint::new(cfg, "teacher", net.init_params::<f32>(2));
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }
}
