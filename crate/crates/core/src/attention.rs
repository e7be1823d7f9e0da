//! Attention-based explanations: raw additive-attention weights for the
//! recurrent model, attention rollout and attention flow for the transformer.

use petgraph::algo::dinics;
use petgraph::graph::{DiGraph, NodeIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{Explanation, MethodId};
use crate::autodiff::Tensor;
use crate::data::Instance;
use crate::models::{argmax, AttentionMode, AttentionStack, AttentionTrace, Model, ModelError, TokenKind};

const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Weight of the identity (residual path) in each layer's mixing matrix:
    /// `Ã = normalize(w·I + (1 − w)·A)`.
    pub residual: f64,
    pub heads: HeadAggregation,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            residual: 0.5,
            heads: HeadAggregation::Mean,
        }
    }
}

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("attention stack has no layers")]
    Empty,
    #[error("layer {layer} head {head}: expected a {n}×{n} matrix, got {shape:?}")]
    Shape {
        layer: usize,
        head: usize,
        n: usize,
        shape: Vec<usize>,
    },
    #[error("layer {layer} head {head} row {row} is not a distribution (sum {sum})")]
    NotRowStochastic { layer: usize, head: usize, row: usize, sum: f64 },
    #[error("residual weight must lie in [0, 1], got {0}")]
    Residual(f64),
    #[error("method {method} does not apply to the {family} model")]
    MethodMismatch { method: MethodId, family: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Pair attention is concatenated in token order; each half sums to one.
pub fn raw_attention(alphas: &[Vec<f64>]) -> Vec<f64> {
    alphas.concat()
}

fn check(stack: &AttentionStack, cfg: &RolloutConfig) -> Result<usize, AttentionError> {
    if !(0.0..=1.0).contains(&cfg.residual) {
        return Err(AttentionError::Residual(cfg.residual));
    }
    if stack.layers.is_empty() || stack.layers.iter().any(Vec::is_empty) {
        return Err(AttentionError::Empty);
    }
    let n = stack.seq_len();
    for (l, heads) in stack.layers.iter().enumerate() {
        for (h, a) in heads.iter().enumerate() {
            if a.shape() != [n, n] {
                return Err(AttentionError::Shape {
                    layer: l,
                    head: h,
                    n,
                    shape: a.shape().to_vec(),
                });
            }
            for r in 0..n {
                let row = a.row(r);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < -STOCHASTIC_TOL) {
                    return Err(AttentionError::NotRowStochastic { layer: l, head: h, row: r, sum });
                }
            }
        }
    }
    Ok(n)
}

/// Per-layer mixing matrices `Ã_l`: heads aggregated, residual added, rows
/// renormalized, in that order.
pub fn mixing_matrices(stack: &AttentionStack, cfg: &RolloutConfig) -> Result<Vec<Tensor>, AttentionError> {
    let n = check(stack, cfg)?;
    let w = cfg.residual;
    Ok(stack
        .layers
        .iter()
        .map(|heads| {
            let agg: Vec<f64> = (0..n * n)
                .map(|k| match cfg.heads {
                    HeadAggregation::Mean => heads.iter().map(|a| a.data()[k]).sum::<f64>() / heads.len() as f64,
                    HeadAggregation::Max => heads.iter().map(|a| a.data()[k]).fold(f64::NEG_INFINITY, f64::max),
                })
                .collect();
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                let row = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    row[j] = (1.0 - w) * agg[i * n + j] + if i == j { w } else { 0.0 };
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::matrix(n, n, data).expect("n×n")
        })
        .collect())
}

/// `R = Ã_L ⋯ Ã_1`.
pub fn rollout_matrix(stack: &AttentionStack, cfg: &RolloutConfig) -> Result<Tensor, AttentionError> {
    let mats = mixing_matrices(stack, cfg)?;
    let mut r = mats[0].clone();
    for a in &mats[1..] {
        r = a.matmul(&r).expect("square");
    }
    Ok(r)
}

fn content(stack: &AttentionStack) -> Vec<usize> {
    (0..stack.seq_len()).filter(|&i| stack.kinds[i] == TokenKind::Content).collect()
}

/// Rollout row of the `[CLS]` position, content tokens only, not renormalized.
pub fn attention_rollout(stack: &AttentionStack, cfg: &RolloutConfig) -> Result<Vec<f64>, AttentionError> {
    let r = rollout_matrix(stack, cfg)?;
    let row = r.row(stack.cls);
    Ok(content(stack).into_iter().map(|p| row[p]).collect())
}

/// Layered flow network: node `(l, i)` is position `i` after layer `l`
/// (layer 0 being the input); `(l, i) → (l−1, j)` has capacity `Ã_l[i, j]`.
fn flow_network(mats: &[Tensor], n: usize) -> DiGraph<(), f64> {
    let layers = mats.len();
    let mut g = DiGraph::with_capacity((layers + 1) * n, layers * n * n);
    for _ in 0..(layers + 1) * n {
        g.add_node(());
    }
    let node = |l: usize, i: usize| NodeIndex::new(l * n + i);
    for (l, a) in mats.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                let c = a.get2(i, j);
                if c > 0.0 {
                    g.add_edge(node(l + 1, i), node(l, j), c);
                }
            }
        }
    }
    g
}

/// Max-flow from the last-layer `[CLS]` node to each input token, content
/// tokens only.
pub fn attention_flow(stack: &AttentionStack, cfg: &RolloutConfig) -> Result<Vec<f64>, AttentionError> {
    let mats = mixing_matrices(stack, cfg)?;
    let n = stack.seq_len();
    let g = flow_network(&mats, n);
    let source = NodeIndex::new(mats.len() * n + stack.cls);
    Ok(content(stack)
        .par_iter()
        .map(|&t| dinics(&g, source, NodeIndex::new(t)).0)
        .collect())
}

/// Runs `model` on `instance` and explains it with an attention method.
pub fn explain_with_attention(
    model: &Model,
    instance: &Instance,
    method: MethodId,
    cfg: &RolloutConfig,
) -> Result<Explanation, AttentionError> {
    let input = model.encode(instance)?;
    let (logits, trace) = model.run(&input)?;
    let positions = input.content_positions();
    let (scores, degenerate) = match (method, trace) {
        (MethodId::RawAttention, AttentionTrace::Recurrent(att)) => {
            let all = raw_attention(&att.alphas);
            (positions.iter().map(|&p| all[p]).collect(), att.mode == AttentionMode::Uniform)
        }
        (MethodId::AttentionRollout, AttentionTrace::Transformer(stack)) => (attention_rollout(&stack, cfg)?, false),
        (MethodId::AttentionFlow, AttentionTrace::Transformer(stack)) => (attention_flow(&stack, cfg)?, false),
        _ => {
            return Err(AttentionError::MethodMismatch {
                method,
                family: model.family(),
            })
        }
    };
    // uniform self-attention carries no signal either
    let degenerate = degenerate || model.attention_mode() == AttentionMode::Uniform;
    Ok(Explanation {
        instance_id: instance.id.clone(),
        method,
        target: argmax(&logits),
        tokens: positions.iter().map(|&p| input.tokens[p].clone()).collect(),
        scores,
        residual: None,
        degenerate,
    })
}

#[cfg(test)]
mod tests;
