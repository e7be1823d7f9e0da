use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, RecurrentConfig, TransformerConfig, Vocab};
use crate::autodiff::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Which network a checkpoint holds, with its full configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Architecture {
    Recurrent(RecurrentConfig),
    Transformer(TransformerConfig),
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Recurrent(c) => write!(
                f,
                "recurrent(vocab={}, emb={}, hidden={}, attn={}, classes={}, pair={})",
                c.vocab_size, c.embed_dim, c.hidden_dim, c.attention_dim, c.num_classes, c.pair
            ),
            Self::Transformer(c) => write!(
                f,
                "transformer(vocab={}, d={}, heads={}, layers={}, ff={}, max_len={}, classes={}, pair={})",
                c.vocab_size, c.d_model, c.heads, c.layers, c.ff_dim, c.max_len, c.num_classes, c.pair
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs_run: usize,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub vocabulary: Vocab,
    pub weights: Vec<NamedArray>,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { expected: u32, found: u32 },
    #[error("architecture mismatch: expected {expected}, checkpoint holds {found}")]
    Architecture { expected: Box<Architecture>, found: Box<Architecture> },
    #[error("weight `{name}`: {detail}")]
    Weight { name: String, detail: String },
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: TrainingMetadata) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            architecture: model.architecture(),
            vocabulary: model.vocab.clone(),
            weights: model
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            metadata,
        }
    }

    pub fn to_model(&self) -> Result<Model, CheckpointError> {
        // weights are overwritten below, the draw only fixes the layout
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = self.vocabulary.clone();
        let mut model = match &self.architecture {
            Architecture::Recurrent(c) => Model::recurrent(vocab, c.clone(), &mut rng),
            Architecture::Transformer(c) => Model::transformer(vocab, c.clone(), &mut rng),
        };
        if model.architecture() != self.architecture {
            return Err(CheckpointError::Architecture {
                expected: Box::new(self.architecture.clone()),
                found: Box::new(model.architecture()),
            });
        }
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.weights.len() {
            return Err(CheckpointError::Weight {
                name: "*".into(),
                detail: format!("expected {} arrays, found {}", names.len(), self.weights.len()),
            });
        }
        for ((slot, name), stored) in model.params_mut().into_iter().zip(&names).zip(&self.weights) {
            if stored.name != *name {
                return Err(CheckpointError::Weight {
                    name: name.clone(),
                    detail: format!("found `{}` in its place", stored.name),
                });
            }
            if stored.shape != slot.shape() {
                return Err(CheckpointError::Weight {
                    name: name.clone(),
                    detail: format!("shape {:?}, expected {:?}", stored.shape, slot.shape()),
                });
            }
            *slot = Tensor::new(stored.shape.clone(), stored.data.clone()).map_err(|e| CheckpointError::Weight {
                name: name.clone(),
                detail: e.to_string(),
            })?;
        }
        Ok(model)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        // read the version first so old or future files fail with a clear message
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("format_version").and_then(serde_json::Value::as_u64);
        match found {
            Some(v) if v == FORMAT_VERSION as u64 => Ok(serde_json::from_value(raw)?),
            Some(v) => Err(CheckpointError::Version {
                expected: FORMAT_VERSION,
                found: v as u32,
            }),
            None => Err(CheckpointError::Parse(serde::de::Error::missing_field("format_version"))),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(model: &Model, metadata: &TrainingMetadata, path: &Path) -> Result<(), CheckpointError> {
    let ckpt = Checkpoint::from_model(model, metadata.clone());
    let text = serde_json::to_string(&ckpt)?;
    fs::write(path, text).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Checkpoint::from_json(&text)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainingMetadata), CheckpointError> {
    let ckpt = read(path)?;
    Ok((ckpt.to_model()?, ckpt.metadata))
}

/// Loads only if the stored architecture equals `expected`.
pub fn load_checkpoint_as(path: &Path, expected: &Architecture) -> Result<(Model, TrainingMetadata), CheckpointError> {
    let ckpt = read(path)?;
    if ckpt.architecture != *expected {
        return Err(CheckpointError::Architecture {
            expected: Box::new(expected.clone()),
            found: Box::new(ckpt.architecture),
        });
    }
    Ok((ckpt.to_model()?, ckpt.metadata))
}

pub fn read_metadata(path: &Path) -> Result<TrainingMetadata, CheckpointError> {
    Ok(read(path)?.metadata)
}
