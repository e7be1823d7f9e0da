//! Token-level explanations: LIME, Integrated Gradients, DeepLIFT, Grad-SHAP,
//! Deep-SHAP and leave-one-out, plus exact Shapley values for small games.
//!
//! Gradient methods work in embedding space. Each method scores every input
//! position internally and then keeps the content tokens only; `[CLS]`,
//! `[SEP]` and pads never appear in an [`Explanation`].

mod gradient;
mod perturb;
mod shapley;


use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::Instance;
use crate::models::{argmax, Model, ModelError, ModelInput, Vocab};

pub use gradient::{deep_shap, deeplift, grad_shap, integrated_gradients, GradShapConfig, IgConfig};
pub use perturb::{leave_one_out, lime, LimeConfig};
pub use shapley::{exact_shapley, MAX_PLAYERS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodId {
    Lime,
    IntegratedGradients,
    Deeplift,
    GradShap,
    DeepShap,
    LeaveOneOut,
    RawAttention,
    AttentionRollout,
    AttentionFlow,
}

impl MethodId {
    pub const ALL: [MethodId; 9] = [
        Self::Lime,
        Self::IntegratedGradients,
        Self::Deeplift,
        Self::GradShap,
        Self::DeepShap,
        Self::LeaveOneOut,
        Self::RawAttention,
        Self::AttentionRollout,
        Self::AttentionFlow,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::Lime => "lime",
            Self::IntegratedGradients => "integrated-gradients",
            Self::Deeplift => "deeplift",
            Self::GradShap => "grad-shap",
            Self::DeepShap => "deep-shap",
            Self::LeaveOneOut => "leave-one-out",
            Self::RawAttention => "raw-attention",
            Self::AttentionRollout => "attention-rollout",
            Self::AttentionFlow => "attention-flow",
        }
    }

    /// Short column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::Lime => "LIME",
            Self::IntegratedGradients => "Int-Grad",
            Self::Deeplift => "DeepLIFT",
            Self::GradShap => "Grad-SHAP",
            Self::DeepShap => "Deep-SHAP",
            Self::LeaveOneOut => "LOO",
            Self::RawAttention => "Attn",
            Self::AttentionRollout => "Attn Roll",
            Self::AttentionFlow => "Attn Flow",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Self::RawAttention | Self::AttentionRollout | Self::AttentionFlow)
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for MethodId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s || m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|m| m.id()).collect();
                format!("unknown method `{s}` (known: {})", known.join(", "))
            })
    }
}

/// Importance scores for the content tokens of one instance. This is also
/// the attribution-dump record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub instance_id: String,
    pub method: MethodId,
    pub target: usize,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    /// `|Σ scores − (f(x) − f(x̄))|` for path and DeepLIFT methods, measured
    /// over all positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    /// Set when the scores cannot carry a ranking (uniform attention).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl Explanation {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter: {0}")]
    Config(String),
    #[error("at least one baseline is required")]
    NoBaselines,
    #[error("exact Shapley values need n ≤ {max} players, got {n}")]
    TooManyPlayers { n: usize, max: usize },
    #[error("{method} produced a non-finite score")]
    NonFinite { method: MethodId },
    #[error("baseline has shape {got:?}, input has {expected:?}")]
    BaselineShape { got: Vec<usize>, expected: Vec<usize> },
}

/// Anything that maps an `[n, d]` embedding node to class logits.
pub trait Scorer: Sync {
    fn logits(&self, tape: &mut Tape, embeddings: Var) -> Result<Var, AttributionError>;
}

/// A frozen model bound to one encoded instance.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub input: ModelInput,
}

impl Scorer for ModelScorer<'_> {
    fn logits(&self, tape: &mut Tape, embeddings: Var) -> Result<Var, AttributionError> {
        Ok(self.model.forward(tape, &self.input, Some(embeddings), false)?.logits)
    }
}

/// Per-position aggregation of per-dimension attributions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Signed sum over embedding dimensions.
    #[default]
    Sum,
    /// Euclidean norm over embedding dimensions (sign is lost).
    L2,
}

impl Aggregation {
    pub fn apply(self, row: &[f64]) -> f64 {
        match self {
            Self::Sum => row.iter().sum(),
            Self::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Everything an attribution method needs about one instance.
pub struct Subject<S> {
    pub id: String,
    /// Token string of every position.
    pub tokens: Vec<String>,
    /// Positions that are explained and may be masked.
    pub features: Vec<usize>,
    /// Input embeddings `[n, d]`.
    pub embeddings: Tensor,
    /// Embedding written into a masked position.
    pub pad: Vec<f64>,
    pub scorer: S,
}

impl<'a> Subject<ModelScorer<'a>> {
    pub fn from_model(model: &'a Model, instance: &Instance) -> Result<Self, AttributionError> {
        let input = model.encode(instance)?;
        let embeddings = model.embed(&input.ids)?;
        let pad = model.embedding().row(Vocab::PAD_ID).to_vec();
        Ok(Self {
            id: instance.id.clone(),
            tokens: input.tokens.clone(),
            features: input.content_positions(),
            embeddings,
            pad,
            scorer: ModelScorer { model, input },
        })
    }
}

impl<S: Scorer> Subject<S> {
    pub fn num_positions(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Class logits at arbitrary `[n, d]` embeddings.
    pub fn logits_at(&self, x: &Tensor) -> Result<Vec<f64>, AttributionError> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = self.scorer.logits(&mut tape, v)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Target-class logit at `x`.
    pub fn output_at(&self, x: &Tensor, target: usize) -> Result<f64, AttributionError> {
        Ok(self.logits_at(x)?[target])
    }

    pub fn predicted(&self) -> Result<usize, AttributionError> {
        Ok(argmax(&self.logits_at(&self.embeddings)?))
    }

    /// Target logit and its gradient with respect to the embeddings at `x`.
    pub fn gradient_at(&self, x: &Tensor, target: usize) -> Result<(f64, Tensor), AttributionError> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let logits = self.scorer.logits(&mut tape, v)?;
        let out = tape.pick(logits, target)?;
        let grad = tape.grad_wrt_input(out, v)?;
        Ok((tape.value(out).data()[0], grad))
    }

    /// Input embeddings with the given positions replaced by the pad row.
    pub fn masked(&self, positions: impl IntoIterator<Item = usize>) -> Tensor {
        let mut x = self.embeddings.clone();
        let d = self.dim();
        for p in positions {
            x.data_mut()[p * d..(p + 1) * d].copy_from_slice(&self.pad);
        }
        x
    }

    /// Every explained position replaced by the pad row.
    pub fn pad_baseline(&self) -> Tensor {
        self.masked(self.features.clone())
    }

    /// Explanation from per-position scores, keeping explained positions.
    pub(crate) fn explanation(&self, method: MethodId, target: usize, per_position: &[f64]) -> Result<Explanation, AttributionError> {
        let scores: Vec<f64> = self.features.iter().map(|&p| per_position[p]).collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(AttributionError::NonFinite { method });
        }
        Ok(Explanation {
            instance_id: self.id.clone(),
            method,
            target,
            tokens: self.features.iter().map(|&p| self.tokens[p].clone()).collect(),
            scores,
            residual: None,
            degenerate: false,
        })
    }

    pub(crate) fn check_baseline(&self, b: &Tensor) -> Result<(), AttributionError> {
        if b.shape() != self.embeddings.shape() {
            return Err(AttributionError::BaselineShape {
                got: b.shape().to_vec(),
                expected: self.embeddings.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// How reference inputs are built.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineMode {
    /// Every explained token replaced by `[PAD]`.
    PadToken,
    /// Every explained token replaced by a row drawn uniformly from this
    /// `[k, d]` set of embeddings.
    TokenSet(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSpec {
    pub mode: BaselineMode,
    /// Number of references for the SHAP variants.
    pub backgrounds: usize,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            mode: BaselineMode::PadToken,
            backgrounds: 1,
        }
    }
}

impl BaselineSpec {
    /// Token-set baselines drawn from a model's vocabulary, specials excluded.
    pub fn token_set(model: &Model, backgrounds: usize) -> Self {
        let table = model.embedding();
        let d = table.shape()[1];
        let rows: Vec<f64> = (4..table.shape()[0]).flat_map(|r| table.row(r).to_vec()).collect();
        let k = rows.len() / d;
        Self {
            mode: BaselineMode::TokenSet(Tensor::matrix(k, d, rows).expect("rows are complete")),
            backgrounds,
        }
    }

    /// References for `subject`; the pad mode always yields exactly one.
    pub fn build<S: Scorer, R: rand::Rng + ?Sized>(
        &self,
        subject: &Subject<S>,
        rng: &mut R,
    ) -> Result<Vec<Tensor>, AttributionError> {
        if self.backgrounds == 0 {
            return Err(AttributionError::NoBaselines);
        }
        match &self.mode {
            BaselineMode::PadToken => Ok(vec![subject.pad_baseline()]),
            BaselineMode::TokenSet(set) => {
                let d = subject.dim();
                if set.rank() != 2 || set.shape()[1] != d || set.shape()[0] == 0 {
                    return Err(AttributionError::Config(format!(
                        "token set must be [k, {d}] with k ≥ 1, got {:?}",
                        set.shape()
                    )));
                }
                Ok((0..self.backgrounds)
                    .map(|_| {
                        let mut x = subject.embeddings.clone();
                        for &p in &subject.features {
                            let r = rng.random_range(0..set.shape()[0]);
                            x.data_mut()[p * d..(p + 1) * d].copy_from_slice(set.row(r));
                        }
                        x
                    })
                    .collect())
            }
        }
    }
}

pub fn write_dump(path: &Path, explanations: &[Explanation]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in explanations {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_dump(path: &Path) -> std::io::Result<Vec<Explanation>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}
