//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header (configs, tensor names and shapes), every tensor's data as
//! little-endian `f32` in header order, then a SHA-256 of all preceding
//! bytes. Loading verifies the digest before parsing anything.
//! Trainability is not stored: loaded tensors are frozen and each training
//! stage marks what it updates.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lm::{LmConfig, LmParams, LoraAdapter, LoraConfig};
use crate::model::{ModelBundle, Stage};
use crate::params::{hex, ParamSet};
use crate::projector::{InitScheme, MlpProjector, ProjectorRole};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PPCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint checksum mismatch (truncated or corrupted file)")]
    Checksum,
    #[error("not a checkpoint file")]
    Magic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no speech projector")]
    NoSpeechProjector,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a checkpoint can hold. Only the LM is mandatory, so the
/// pretrained LM can be stored before any projector exists.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub lm: LmParams<f32>,
    pub sp: Option<MlpProjector<f32>>,
    pub pp: Option<MlpProjector<f32>>,
    pub lora: Option<LoraAdapter<f32>>,
    pub downsample_k: usize,
    pub pp_include_specials: bool,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    lm_config: LmConfig,
    downsample_k: usize,
    pp_include_specials: bool,
    stages: Vec<Stage>,
    has_sp: bool,
    has_pp: bool,
    lora: Option<LoraConfig>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_bundle(bundle: &ModelBundle<f32>) -> Self {
        Self {
            lm: bundle.lm.clone(),
            sp: Some(bundle.sp.clone()),
            pp: bundle.pp.clone(),
            lora: bundle.lora.clone(),
            downsample_k: bundle.downsample_k,
            pp_include_specials: bundle.pp_include_specials,
            stages: bundle.stages.clone(),
        }
    }

    pub fn into_bundle(self) -> Result<ModelBundle<f32>, CheckpointError> {
        Ok(ModelBundle {
            lm: self.lm,
            sp: self.sp.ok_or(CheckpointError::NoSpeechProjector)?,
            pp: self.pp,
            lora: self.lora,
            downsample_k: self.downsample_k,
            pp_include_specials: self.pp_include_specials,
            stages: self.stages,
        })
    }

    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = self.lm.tensors();
        for p in [&self.sp, &self.pp].into_iter().flatten() {
            out.extend(p.tensors());
        }
        if let Some(l) = &self.lora {
            out.extend(l.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out = self.lm.tensors_mut();
        for p in [&mut self.sp, &mut self.pp].into_iter().flatten() {
            out.extend(p.tensors_mut());
        }
        if let Some(l) = &mut self.lora {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let header = Header {
            lm_config: self.lm.config.clone(),
            downsample_k: self.downsample_k,
            pp_include_specials: self.pp_include_specials,
            stages: self.stages.clone(),
            has_sp: self.sp.is_some(),
            has_pp: self.pp.is_some(),
            lora: self.lora.as_ref().map(|l| l.config.clone()),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 12 + 32 {
            return Err(CheckpointError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        if &body[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let malformed = |m: String| CheckpointError::Malformed(m);
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| malformed("header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| malformed(e.to_string()))?;
        let mut lm_config = header.lm_config.clone();
        lm_config.validate().map_err(|e| malformed(e.to_string()))?;
        // initialize with the right shapes, then overwrite every value
        lm_config.seed = header.lm_config.seed;
        let lm = LmParams::init(&lm_config).map_err(|e| malformed(e.to_string()))?;
        let find = |name: &str| {
            header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.shape.clone())
                .ok_or_else(|| malformed(format!("missing tensor {name}")))
        };
        let projector = |role: ProjectorRole| -> Result<MlpProjector<f32>, CheckpointError> {
            let r = role.as_str();
            let w1 = find(&format!("{r}.w1"))?;
            let w2 = find(&format!("{r}.w2"))?;
            if w1.len() != 2 || w2.len() != 2 {
                return Err(malformed(format!("{r} projector weights must be matrices")));
            }
            MlpProjector::init(role, w1[0], w1[1], w2[1], 0, InitScheme::KaimingUniform)
                .map_err(|e| malformed(e.to_string()))
        };
        let sp = if header.has_sp { Some(projector(ProjectorRole::Speech)?) } else { None };
        let pp = if header.has_pp { Some(projector(ProjectorRole::Prompt)?) } else { None };
        let lora = match &header.lora {
            Some(c) => Some(LoraAdapter::init(&lm_config, c, 0).map_err(|e| malformed(e.to_string()))?),
            None => None,
        };
        let mut ckpt = Checkpoint {
            lm,
            sp,
            pp,
            lora,
            downsample_k: header.downsample_k,
            pp_include_specials: header.pp_include_specials,
            stages: header.stages,
        };
        let mut offset = header_end;
        let slots = ckpt.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(malformed(format!(
                "header lists {} tensors, configuration implies {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for ((name, t), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(malformed(format!("tensor {} does not match expected {name}", entry.name)));
            }
            let len = t.numel() * 4;
            let chunk = body
                .get(offset..offset + len)
                .ok_or_else(|| malformed(format!("data for {name} is truncated")))?;
            for (x, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
                *x = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            t.set_requires_grad(false);
            offset += len;
        }
        if offset != body.len() {
            return Err(malformed("trailing bytes after tensor data".into()));
        }
        Ok(ckpt)
    }

    /// Writes the checkpoint and returns the SHA-256 of the file.
    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        let bytes = self.to_bytes();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        // write-then-rename so a crash never leaves a partial checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_bundle(bundle: &ModelBundle<f32>, path: &Path) -> Result<String, CheckpointError> {
    Checkpoint::from_bundle(bundle).save(path)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle<f32>, CheckpointError> {
    Checkpoint::load(path)?.into_bundle()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let config = LmConfig {
            vocab_size: 96,
            model_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            max_sequence_length: 32,
            seed: 1,
        };
        let lm = LmParams::init(&config).unwrap();
        let sp = MlpProjector::init(ProjectorRole::Speech, 10, 6, 8, 2, InitScheme::KaimingUniform).unwrap();
        Checkpoint {
            lm,
            sp: Some(sp),
            pp: None,
            lora: Some(LoraAdapter::init(&config, &LoraConfig::default(), 3).unwrap()),
            downsample_k: 5,
            pp_include_specials: true,
            stages: vec![Stage::PretrainLm, Stage::TrainSp],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut c = small();
        for (_, t) in c.tensors_mut() {
            t.set_requires_grad(false);
        }
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn trainability_is_not_stored() {
        let mut c = small();
        let frozen = c.to_bytes();
        c.lm.set_frozen("all", true).unwrap();
        assert_eq!(c.to_bytes(), frozen);
        let back = Checkpoint::from_bytes(&frozen).unwrap();
        assert!(back.tensors().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = small().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 7]),
            Err(CheckpointError::Checksum)
        ));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum)));
        // a valid digest over a different version number
        let mut other = bytes[..bytes.len() - 32].to_vec();
        other[8] = 9;
        let digest = Sha256::digest(&other);
        other.extend_from_slice(&digest);
        assert!(matches!(
            Checkpoint::from_bytes(&other),
            Err(CheckpointError::Version { found: 9, .. })
        ));
    }
}
