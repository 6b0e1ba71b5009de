//! Checkpoint directories: `manifest.json`, `params.bin` (little-endian f32
//! in registry order) and `vocab.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CanBertModel, ModelConfig, ModelError};
use crate::numerics::{Parameter, Tensor2};
use crate::util::sha256_hex;
use crate::windowing::IdVocabulary;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";
const VOCAB: &str = "vocab.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub parameters: Vec<ParameterEntry>,
    pub parameter_count: usize,
    pub blob_sha256: String,
    pub created_by: String,
    /// Free-form provenance supplied by the caller (training config, seeds).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CanBertModel,
    pub vocab: IdVocabulary,
    pub manifest: CheckpointManifest,
}

fn encode_blob(model: &CanBertModel) -> Vec<u8> {
    let mut blob = Vec::with_capacity(model.parameter_count() * 4);
    for p in model.params() {
        for &v in p.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    blob
}

/// SHA-256 of the parameter blob the model would be saved as.
pub fn parameter_hash(model: &CanBertModel) -> String {
    sha256_hex(&encode_blob(model))
}

/// Writes a checkpoint directory, creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    model: &CanBertModel,
    vocab: &IdVocabulary,
    metadata: serde_json::Value,
) -> Result<CheckpointManifest, ModelError> {
    if vocab.total_tokens() != model.config().total_tokens {
        return Err(ModelError::Checkpoint(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.total_tokens(),
            model.config().total_tokens
        )));
    }
    std::fs::create_dir_all(dir)?;
    let blob = encode_blob(model);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config().clone(),
        vocab_hash: vocab.hash(),
        parameters: model
            .params()
            .iter()
            .map(|p| ParameterEntry {
                name: p.name.clone(),
                shape: [p.shape().0, p.shape().1],
            })
            .collect(),
        parameter_count: model.parameter_count(),
        blob_sha256: sha256_hex(&blob),
        created_by: concat!("canids ", env!("CARGO_PKG_VERSION")).to_string(),
        metadata,
    };
    std::fs::write(dir.join(BLOB), &blob)?;
    vocab.save(&dir.join(VOCAB)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads and validates a checkpoint directory. Nothing is returned unless
/// every check passes.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, ModelError> {
    let bad = |msg: String| Err(ModelError::Checkpoint(msg));
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return bad(format!("unsupported format version {}", manifest.format_version));
    }
    let vocab = IdVocabulary::load(&dir.join(VOCAB)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if vocab.hash() != manifest.vocab_hash {
        return bad("vocabulary hash mismatch".into());
    }
    let config = manifest.config.clone();
    config.validate()?;
    if vocab.total_tokens() != config.total_tokens {
        return bad(format!(
            "vocabulary has {} tokens, config expects {}",
            vocab.total_tokens(),
            config.total_tokens
        ));
    }
    let registry = CanBertModel::registry(&config);
    let listed: Vec<(String, (usize, usize))> = manifest
        .parameters
        .iter()
        .map(|e| (e.name.clone(), (e.shape[0], e.shape[1])))
        .collect();
    if listed != registry {
        return bad("parameter registry does not match config".into());
    }
    let blob = std::fs::read(dir.join(BLOB))?;
    let total: usize = registry.iter().map(|(_, (r, c))| r * c).sum();
    if blob.len() != total * 4 {
        return bad(format!("expected {} parameter bytes, found {}", total * 4, blob.len()));
    }
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return bad("parameter blob hash mismatch".into());
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let params = registry
        .into_iter()
        .map(|(name, (r, c))| {
            let data: Vec<f64> = values.by_ref().take(r * c).collect();
            Ok(Parameter::new(name, Tensor2::from_vec(r, c, data)?))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let model = CanBertModel::from_parameters(config, params)?;
    Ok(Checkpoint { model, vocab, manifest })
}
