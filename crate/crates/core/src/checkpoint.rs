//! Checkpoint directory: `manifest` (JSON) plus `weights.bin` (little-endian
//! f32 tensors in manifest order).

use std::fs;
use std::path::Path;

use empdial_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::priors::Priors;
use crate::trainer::EpochRecord;

pub const FORMAT: &str = "empdial-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
}

/// Human-readable prior exports kept next to the exact values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorExports {
    pub emo_emo: String,
    pub emo_intent: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub weights_sha256: String,
    pub weights_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub priors: Priors,
    pub prior_exports: PriorExports,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

fn encode(model: &Model<f32>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(model.params.num_values() * 4);
    let mut entries = Vec::with_capacity(model.params.len());
    for (_, name, t) in model.params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    (bytes, entries)
}

/// Writes `dir/manifest` and `dir/weights.bin`, creating `dir` if needed.
/// The model's sizes are taken from `model.config`, overriding
/// `config.model`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Model<f32>,
    config: &TrainConfig,
    history: &[EpochRecord],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bytes, tensors) = encode(model);
    let mut config = config.clone();
    config.model = model.config.clone();
    let manifest = Manifest {
        format: FORMAT.into(),
        weights_sha256: hex::encode(Sha256::digest(&bytes)),
        weights_bytes: bytes.len() as u64,
        tensors,
        config,
        vocab: model.vocab.tokens().to_vec(),
        priors: model.priors.clone(),
        prior_exports: PriorExports {
            emo_emo: model.priors.emo_emo.export(),
            emo_intent: model.priors.emo_intent.export(),
        },
        history: history.to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, &bytes).map_err(|e| Error::io(&weights, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
    if bytes.len() as u64 != manifest.weights_bytes {
        return Err(Error::Checkpoint(format!(
            "weights.bin has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.weights_bytes
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(Error::Checkpoint("weights.bin does not match the manifest checksum".into()));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset as usize + 4 * n > bytes.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` has an inconsistent offset", e.name)));
        }
        let start = e.offset as usize;
        let data = bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        expected_offset += 4 * n as u64;
    }
    if expected_offset != manifest.weights_bytes {
        return Err(Error::Checkpoint("manifest tensors do not cover weights.bin".into()));
    }
    let vocab = Vocabulary::from_tokens(manifest.vocab)?;
    let model = Model::from_tensors(manifest.config.model.clone(), vocab, manifest.priors, tensors)?;
    Ok(Checkpoint {
        model,
        config: manifest.config,
        history: manifest.history,
    })
}
