//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length, a JSON
//! header, then every parameter leaf (and optionally the Adam moments) as raw
//! little-endian `f64` values in canonical leaf order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attributes::MetricalWeightProfile;
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{AdamState, EpochRecord, TrainConfig};

pub const MAGIC: &[u8; 8] = b"LSRVAE\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CheckpointError {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointError::Io(_) => "Io",
            CheckpointError::BadMagic => "BadMagic",
            CheckpointError::VersionMismatch { .. } => "VersionMismatch",
            CheckpointError::Corrupt(_) => "Corrupt",
            CheckpointError::Model(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LeafInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    scalar: String,
    model: ModelConfig,
    profile: MetricalWeightProfile,
    train_config: TrainConfig,
    epochs_done: usize,
    history: Vec<EpochRecord>,
    leaves: Vec<LeafInfo>,
    adam_step: Option<u64>,
}

/// A trained model plus what is needed to interpret or resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub profile: MetricalWeightProfile,
    pub train_config: TrainConfig,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn lsr_enabled(&self) -> bool {
        self.train_config.lsr_enabled
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let leaves = self.params.weights.named();
        let header = Header {
            scalar: T::NAME.to_string(),
            model: self.params.config.clone(),
            profile: self.profile,
            train_config: self.train_config.clone(),
            epochs_done: self.epochs_done,
            history: self.history.clone(),
            leaves: leaves.iter().map(|(n, t)| LeafInfo { name: n.clone(), shape: t.shape().to_vec() }).collect(),
            adam_step: self.adam.as_ref().map(|a| a.step),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor<T>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_f64_exact().to_le_bytes());
            }
        };
        for (_, t) in &leaves {
            put(t);
        }
        if let Some(adam) = &self.adam {
            adam.first.iter().chain(&adam.second).for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if header_len > body.len() {
            return Err(CheckpointError::Corrupt("header length exceeds file".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let mut payload = &body[header_len..];

        let mut params = ModelParams::<T>::init(header.model.clone())?;
        let expected: Vec<LeafInfo> = params
            .weights
            .named()
            .iter()
            .map(|(n, t)| LeafInfo { name: n.clone(), shape: t.shape().to_vec() })
            .collect();
        if expected != header.leaves {
            return Err(CheckpointError::Corrupt("parameter layout does not match the model configuration".into()));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor<T>, CheckpointError> {
            let n: usize = shape.iter().product();
            if payload.len() < n * 8 {
                return Err(CheckpointError::Corrupt("truncated tensor data".into()));
            }
            let data = payload[..n * 8]
                .chunks_exact(8)
                .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect();
            payload = &payload[n * 8..];
            Tensor::new(shape.to_vec(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
        };
        let mut loaded = Vec::new();
        for leaf in &header.leaves {
            loaded.push(take(&leaf.shape)?);
        }
        let adam = match header.adam_step {
            Some(step) => {
                let mut first = Vec::new();
                for leaf in &header.leaves {
                    first.push(take(&leaf.shape)?);
                }
                let mut second = Vec::new();
                for leaf in &header.leaves {
                    second.push(take(&leaf.shape)?);
                }
                Some(AdamState { step, first, second })
            }
            None => None,
        };
        if !payload.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", payload.len())));
        }
        let mut it = loaded.into_iter();
        params.weights.for_each_mut(|t| *t = it.next().expect("one tensor per leaf"));
        Ok(Self {
            params,
            profile: header.profile,
            train_config: header.train_config,
            epochs_done: header.epochs_done,
            history: header.history,
            adam,
        })
    }

    /// Writes atomically: a sibling temp file is written, synced and renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String, std::io::Error> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes `bytes` to a temp file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
