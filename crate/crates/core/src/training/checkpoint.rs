//! Checkpoint file: a magic line, a one-line JSON manifest, then the tensor
//! blob as little-endian `f32`, row-major, in manifest order. The manifest
//! carries a SHA-256 of the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamGroup;
use crate::training::trainer::TrainingMeta;

pub const MAGIC: &[u8] = b"MEMIR-CHECKPOINT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub meta: Option<TrainingMeta>,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub checksum: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: Option<TrainingMeta>,
}

impl Checkpoint {
    pub fn new(model: Model, meta: Option<TrainingMeta>) -> Self {
        Self { model, meta }
    }

    /// Short content id derived from the blob checksum.
    pub fn id(&self) -> String {
        let (_, blob) = self.encode_blob();
        hex::encode(Sha256::digest(&blob))[..16].to_string()
    }

    fn encode_blob(&self) -> (Vec<TensorEntry>, Vec<u8>) {
        let mut blob = Vec::with_capacity(self.model.params.num_scalars() * 4);
        let mut tensors = Vec::with_capacity(self.model.params.len());
        for (_, p) in self.model.params.iter() {
            let offset = blob.len();
            for &v in p.value.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: p.name.clone(),
                group: p.group,
                rows: p.value.rows(),
                cols: p.value.cols(),
                offset,
                length: blob.len() - offset,
            });
        }
        (tensors, blob)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (tensors, blob) = self.encode_blob();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            meta: self.meta.clone(),
            tensors,
            blob_bytes: blob.len(),
            checksum: hex::encode(Sha256::digest(&blob)),
        };
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(serde_json::to_string(&manifest).expect("manifest serializes").as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = |m: String| Error::Checkpoint(m);
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| ck("not a checkpoint file".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ck("manifest is not terminated".into()))?;
        let (head, blob) = (&rest[..nl], &rest[nl + 1..]);
        let version: serde_json::Value =
            serde_json::from_slice(head).map_err(|e| ck(format!("manifest: {e}")))?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(ck(format!("unsupported format version {v}"))),
            None => return Err(ck("manifest has no format version".into())),
        }
        let manifest: Manifest = serde_json::from_value(version).map_err(|e| ck(format!("manifest: {e}")))?;
        if blob.len() != manifest.blob_bytes {
            return Err(ck(format!(
                "blob holds {} bytes, manifest declares {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        if hex::encode(Sha256::digest(blob)) != manifest.checksum {
            return Err(ck("blob checksum mismatch".into()));
        }
        let mut expected_offset = 0usize;
        for t in &manifest.tensors {
            let want = t
                .rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| ck(format!("tensor {} is too large", t.name)))?;
            if t.length != want || t.offset != expected_offset {
                return Err(ck(format!("tensor {} has an inconsistent extent", t.name)));
            }
            expected_offset += want;
        }
        if expected_offset != blob.len() {
            return Err(ck("tensor extents do not cover the blob".into()));
        }
        check_config_fits(&manifest.config, blob.len() / 4)?;

        let mut model = Model::new(manifest.config.clone(), 0).map_err(|e| ck(format!("config: {e}")))?;
        if model.params.len() != manifest.tensors.len() {
            return Err(ck(format!(
                "configuration has {} tensors, manifest lists {}",
                model.params.len(),
                manifest.tensors.len()
            )));
        }
        for t in &manifest.tensors {
            let id = model
                .params
                .find(&t.name)
                .ok_or_else(|| ck(format!("unknown tensor {}", t.name)))?;
            let p = model.params.param(id);
            if p.value.shape() != (t.rows, t.cols) || p.group != t.group {
                return Err(ck(format!(
                    "tensor {} is {}x{} in the manifest but {:?} in the model",
                    t.name,
                    t.rows,
                    t.cols,
                    p.value.shape()
                )));
            }
            let bytes = &blob[t.offset..t.offset + t.length];
            let dst = model.params.get_mut(id).data_mut();
            for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
                let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                if !v.is_finite() {
                    return Err(ck(format!("tensor {} holds a non-finite value", t.name)));
                }
                *d = v as f64;
            }
        }
        Ok(Self {
            model,
            meta: manifest.meta,
        })
    }
}

/// Rejects configurations whose parameters could not fit in `scalars`
/// values, before anything is allocated for them.
fn check_config_fits(cfg: &ModelConfig, scalars: usize) -> Result<()> {
    let dq = cfg.text_dim as u128;
    let lower = [
        cfg.vocab_size as u128 * dq,
        (cfg.max_seq as u128 + 1) * dq,
        cfg.memory_tokens as u128 * dq,
        dq * cfg.image_dim as u128,
        4 * dq * dq,
    ];
    if lower.iter().any(|&n| n > scalars as u128) {
        return Err(Error::Checkpoint("configuration does not match the stored tensors".into()));
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
