//! Binary checkpoint: the only artifact handed from one task to the next.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "IKTCKPT\0"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen     canonical JSON: config, registry, global_step, provenance, manifest
//! payload  ...      f64 tensor data, in manifest order
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::sakt::{SaktConfig, SaktModel};
use crate::seqgen::ProblemRegistry;

pub const MAGIC: &[u8; 8] = b"IKTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub task: String,
    /// Hash of the model and training configuration used for this task.
    pub config_hash: String,
    pub steps: u64,
    /// Hash over the sorted digests of every record the task trained on.
    pub input_digest: String,
    pub input_records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: SaktConfig,
    registry: ProblemRegistry,
    global_step: u64,
    provenance: Vec<ProvenanceEntry>,
    manifest: Vec<ManifestEntry>,
}

/// Model weights plus everything needed to keep training or evaluating.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: SaktConfig,
    pub registry: ProblemRegistry,
    /// Parameter values in canonical order.
    pub tensors: Vec<(String, Tensor)>,
    pub global_step: u64,
    pub provenance: Vec<ProvenanceEntry>,
}

impl Checkpoint {
    pub fn from_model(
        model: &SaktModel,
        registry: ProblemRegistry,
        global_step: u64,
        provenance: Vec<ProvenanceEntry>,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            registry,
            tensors: model
                .params()
                .into_iter()
                .map(|(n, p)| (n, p.value.clone()))
                .collect(),
            global_step,
            provenance,
        }
    }

    /// Rebuilds a model with zero gradients and momentum.
    pub fn to_model(&self) -> Result<SaktModel> {
        let mut model = SaktModel::init(&self.config, 0)?;
        let mut params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for ((name, p), (tname, t)) in params.iter_mut().zip(&self.tensors) {
            if name != tname || p.shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "tensor `{tname}` {:?} does not fit parameter `{name}` {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.value = t.clone();
        }
        drop(params);
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let manifest = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() * 8;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            registry: self.registry.clone(),
            global_step: self.global_step,
            provenance: self.provenance.clone(),
            manifest,
        };
        let header = serde_json::to_vec(&serde_json::to_value(&header)?)?;
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + offset + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN + DIGEST_LEN {
            return Err(Error::Integrity("file too short".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = PREAMBLE_LEN
            .checked_add(hlen)
            .filter(|&end| end <= body.len())
            .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREAMBLE_LEN..payload_start])?;
        let payload = &body[payload_start..];
        let mut tensors = Vec::with_capacity(header.manifest.len());
        let mut expected_offset = 0;
        for e in &header.manifest {
            let len: usize = e.shape.iter().product();
            let end = e.offset + len * 8;
            if e.offset != expected_offset || end > payload.len() {
                return Err(Error::Integrity(format!("tensor `{}` out of bounds", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::Integrity("trailing payload bytes".into()));
        }
        let shapes = header.config.parameter_shapes();
        if shapes.len() != tensors.len()
            || shapes
                .iter()
                .zip(&tensors)
                .any(|((n, s), (tn, t))| n != tn || s.as_slice() != t.shape())
        {
            return Err(Error::Integrity("manifest does not match config".into()));
        }
        Ok(Checkpoint {
            format_version: version,
            config: header.config,
            registry: header.registry,
            tensors,
            global_step: header.global_step,
            provenance: header.provenance,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
