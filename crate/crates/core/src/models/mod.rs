//! The two attention classifiers: a BiLSTM with additive attention and a
//! small self-attention encoder. Both expose their attention weights and
//! accept precomputed token embeddings so attribution methods can
//! differentiate with respect to the embedding layer.

mod checkpoint;
mod params;
mod recurrent;
mod transformer;
mod vocab;


use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::{Instance, TaskType};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, read_metadata, save_checkpoint, Architecture, Checkpoint, CheckpointError, NamedArray,
    TrainingMetadata, FORMAT_VERSION,
};
pub use recurrent::{LstmParams, RecurrentAttnClassifier, RecurrentConfig, RecurrentHead};
pub use transformer::{LayerParams, MiniTransformerClassifier, TransformerConfig, TransformerHead};
pub use vocab::{Vocab, CLS, PAD, SEP, UNK};

/// Whether attention weights come from a softmax over scores or are fixed
/// to the uniform distribution over non-pad positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Softmax,
    Uniform,
}

impl std::str::FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown attention mode `{other}` (expected softmax or uniform)")),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence {segment} has no non-pad tokens")]
    EmptySequence { segment: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("model expects {expected:?} input, got {got:?}")]
    TaskMismatch { expected: TaskType, got: TaskType },
    #[error("input must start with [CLS]")]
    MissingCls,
    #[error("embedding input has shape {got:?}, expected {expected:?}")]
    FeatureShape { got: Vec<usize>, expected: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Content,
    Special,
    Pad,
}

/// An instance mapped to ids plus the layout the networks need.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub kinds: Vec<TokenKind>,
    /// Position ranges encoded separately (recurrent pair inputs have two).
    pub segments: Vec<std::ops::Range<usize>>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions that take part in rankings: everything but specials and pad.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.kinds[i] == TokenKind::Content)
            .collect()
    }

    pub fn key_mask(&self, range: std::ops::Range<usize>) -> Vec<bool> {
        self.kinds[range].iter().map(|k| *k != TokenKind::Pad).collect()
    }
}

/// Context vectors of the two sequences of a pair instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairContext {
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

impl PairContext {
    /// Decoder input `[c1; c2; |c1 − c2|; c1 ⊙ c2]`.
    pub fn decoder_input(&self) -> Vec<f64> {
        let mut out = self.c1.clone();
        out.extend_from_slice(&self.c2);
        out.extend(self.c1.iter().zip(&self.c2).map(|(a, b)| (a - b).abs()));
        out.extend(self.c1.iter().zip(&self.c2).map(|(a, b)| a * b));
        out
    }
}

/// Per-layer, per-head `n × n` attention captured during a transformer pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub layers: Vec<Vec<Tensor>>,
    pub kinds: Vec<TokenKind>,
    pub tokens: Vec<String>,
    pub cls: usize,
}

impl AttentionStack {
    pub fn seq_len(&self) -> usize {
        self.kinds.len()
    }
}

/// Additive-attention weights of the recurrent model, one vector per
/// sequence, indexed by position within that sequence (pads carry 0).
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentAttention {
    pub alphas: Vec<Vec<f64>>,
    pub pair: Option<PairContext>,
    pub mode: AttentionMode,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionTrace {
    Recurrent(RecurrentAttention),
    Transformer(AttentionStack),
}

pub struct ForwardPass {
    /// Class logits, shape `[num_classes]`.
    pub logits: Var,
    pub attention: AttentionTrace,
    /// Tape handles for every weight, in [`Model::named_params`] order.
    /// The embedding table is unbound when embeddings were supplied.
    pub params: Vec<Option<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Recurrent(RecurrentAttnClassifier),
    Transformer(MiniTransformerClassifier),
}

/// A network together with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub vocab: Vocab,
    pub network: Network,
}

impl Model {
    pub fn recurrent<R: Rng + ?Sized>(vocab: Vocab, mut config: RecurrentConfig, rng: &mut R) -> Self {
        config.vocab_size = vocab.len();
        Self {
            network: Network::Recurrent(RecurrentAttnClassifier::new(config, rng)),
            vocab,
        }
    }

    pub fn transformer<R: Rng + ?Sized>(vocab: Vocab, mut config: TransformerConfig, rng: &mut R) -> Self {
        config.vocab_size = vocab.len();
        Self {
            network: Network::Transformer(MiniTransformerClassifier::new(config, rng)),
            vocab,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match &self.network {
            Network::Recurrent(m) => Architecture::Recurrent(m.config.clone()),
            Network::Transformer(m) => Architecture::Transformer(m.config.clone()),
        }
    }

    pub fn family(&self) -> &'static str {
        match self.network {
            Network::Recurrent(_) => "recurrent",
            Network::Transformer(_) => "transformer",
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.network {
            Network::Recurrent(m) => m.config.num_classes,
            Network::Transformer(m) => m.config.num_classes,
        }
    }

    pub fn task_type(&self) -> TaskType {
        let pair = match &self.network {
            Network::Recurrent(m) => m.config.pair,
            Network::Transformer(m) => m.config.pair,
        };
        if pair {
            TaskType::Pair
        } else {
            TaskType::Single
        }
    }

    pub fn attention_mode(&self) -> AttentionMode {
        match &self.network {
            Network::Recurrent(m) => m.config.attention,
            Network::Transformer(m) => m.config.attention,
        }
    }

    pub fn set_attention_mode(&mut self, mode: AttentionMode) {
        match &mut self.network {
            Network::Recurrent(m) => m.config.attention = mode,
            Network::Transformer(m) => m.config.attention = mode,
        }
    }

    pub fn embedding(&self) -> &Tensor {
        match &self.network {
            Network::Recurrent(m) => &m.embedding,
            Network::Transformer(m) => &m.embedding,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding().shape()[1]
    }

    pub fn encode(&self, instance: &Instance) -> Result<ModelInput, ModelError> {
        let expected = self.task_type();
        if instance.task_type() != expected {
            return Err(ModelError::TaskMismatch {
                expected,
                got: instance.task_type(),
            });
        }
        if instance.tokens.is_empty() {
            return Err(ModelError::EmptySequence { segment: 0 });
        }
        if instance.tokens2.as_ref().is_some_and(Vec::is_empty) {
            return Err(ModelError::EmptySequence { segment: 1 });
        }
        let mut input = ModelInput {
            ids: vec![],
            tokens: vec![],
            kinds: vec![],
            segments: vec![],
        };
        let push = |input: &mut ModelInput, tok: &str, special: bool| {
            let id = self.vocab.id(tok);
            input.ids.push(id);
            input.tokens.push(tok.to_string());
            input.kinds.push(if special {
                TokenKind::Special
            } else if id == Vocab::PAD_ID {
                TokenKind::Pad
            } else {
                TokenKind::Content
            });
        };
        match &self.network {
            Network::Recurrent(_) => {
                let sequences = std::iter::once(&instance.tokens).chain(instance.tokens2.as_ref());
                for seq in sequences {
                    let start = input.len();
                    seq.iter().for_each(|t| push(&mut input, t, false));
                    input.segments.push(start..input.len());
                }
            }
            Network::Transformer(_) => {
                push(&mut input, CLS, true);
                instance.tokens.iter().for_each(|t| push(&mut input, t, false));
                if let Some(second) = &instance.tokens2 {
                    push(&mut input, SEP, true);
                    second.iter().for_each(|t| push(&mut input, t, false));
                }
                input.segments.push(0..input.len());
            }
        }
        Ok(input)
    }

    /// Embedding rows for `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor, ModelError> {
        let table = self.embedding();
        let d = table.shape()[1];
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= table.shape()[0] {
                return Err(ModelError::UnknownToken {
                    id,
                    vocab: table.shape()[0],
                });
            }
            data.extend_from_slice(table.row(id));
        }
        Ok(Tensor::matrix(ids.len(), d, data)?)
    }

    /// Input embeddings with every content token replaced by `[PAD]`;
    /// special tokens keep their own embeddings.
    pub fn pad_baseline(&self, input: &ModelInput) -> Result<Tensor, ModelError> {
        let ids: Vec<usize> = input
            .ids
            .iter()
            .zip(&input.kinds)
            .map(|(&id, k)| if *k == TokenKind::Content { Vocab::PAD_ID } else { id })
            .collect();
        self.embed(&ids)
    }

    /// Records a forward pass. With `embeddings` the token embedding lookup
    /// is skipped and the given `[n, d]` node is used instead.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        embeddings: Option<Var>,
        trainable: bool,
    ) -> Result<ForwardPass, ModelError> {
        match &self.network {
            Network::Recurrent(m) => m.forward(tape, input, embeddings, trainable),
            Network::Transformer(m) => m.forward(tape, input, embeddings, trainable),
        }
    }

    pub fn logits(&self, input: &ModelInput) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, None, false)?;
        Ok(tape.value(pass.logits).data().to_vec())
    }

    /// Logits and attention for an instance.
    pub fn run(&self, input: &ModelInput) -> Result<(Vec<f64>, AttentionTrace), ModelError> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, None, false)?;
        Ok((tape.value(pass.logits).data().to_vec(), pass.attention))
    }

    pub fn predict(&self, input: &ModelInput) -> Result<usize, ModelError> {
        Ok(argmax(&self.logits(input)?))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match &self.network {
            Network::Recurrent(m) => m.named_params(),
            Network::Transformer(m) => m.named_params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.network {
            Network::Recurrent(m) => m.params_mut(),
            Network::Transformer(m) => m.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Re-zeroes the `[PAD]` embedding row after a weight update.
    pub fn enforce_invariants(&mut self) {
        let table = match &mut self.network {
            Network::Recurrent(m) => &mut m.embedding,
            Network::Transformer(m) => &mut m.embedding,
        };
        let d = table.shape()[1];
        table.data_mut()[Vocab::PAD_ID * d..(Vocab::PAD_ID + 1) * d].fill(0.0);
    }
}

/// Index of the largest entry; the earliest wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Shared checks on an embedding input node.
pub(crate) fn check_features(tape: &Tape, v: Var, n: usize, d: usize) -> Result<(), ModelError> {
    if tape.shape(v) != [n, d] {
        return Err(ModelError::FeatureShape {
            got: tape.shape(v).to_vec(),
            expected: vec![n, d],
        });
    }
    Ok(())
}

pub(crate) fn check_ids(ids: &[usize], vocab: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(ModelError::UnknownToken { id, vocab }),
        None => Ok(()),
    }
}

/// Initial weights: N(0, 1/fan_in).
pub(crate) fn init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, (1.0 / shape[0] as f64).sqrt(), rng)
}
