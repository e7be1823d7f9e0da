use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::param_group;
use super::recurrent::uniform_weights;
use super::{
    check_features, check_ids, init, AttentionMode, AttentionStack, AttentionTrace, ForwardPass, ModelError,
    ModelInput, Vocab,
};
use crate::autodiff::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub pair: bool,
    #[serde(default)]
    pub attention: AttentionMode,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            heads: 4,
            layers: 3,
            ff_dim: 64,
            max_len: 256,
            num_classes: 2,
            pair: false,
            attention: AttentionMode::Softmax,
        }
    }
}

const LN_EPS: f64 = 1e-5;

param_group!(
    /// One encoder layer: multi-head self-attention and a tanh feed-forward
    /// block, each followed by a residual connection and layer norm.
    LayerParams => BoundLayer {
        wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b,
        ff_w1, ff_b1, ff_w2, ff_b2, ln2_g, ln2_b,
    }
);

param_group!(
    TransformerHead => BoundTransformerHead { positions, cls_w, cls_b }
);

impl LayerParams {
    fn new<R: Rng + ?Sized>(d: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            wq: init(&[d, d], rng),
            bq: Tensor::zeros(&[d]),
            wk: init(&[d, d], rng),
            bk: Tensor::zeros(&[d]),
            wv: init(&[d, d], rng),
            bv: Tensor::zeros(&[d]),
            wo: init(&[d, d], rng),
            bo: Tensor::zeros(&[d]),
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            ff_w1: init(&[d, ff], rng),
            ff_b1: Tensor::zeros(&[ff]),
            ff_w2: init(&[ff, d], rng),
            ff_b2: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
        }
    }
}

/// Post-norm self-attention encoder read out at the `[CLS]` position.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniTransformerClassifier {
    pub config: TransformerConfig,
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub head: TransformerHead,
}

impl MiniTransformerClassifier {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Self {
        assert!(
            config.heads > 0 && config.d_model.is_multiple_of(config.heads),
            "d_model must be divisible by heads"
        );
        let d = config.d_model;
        let std = (1.0 / d as f64).sqrt();
        let mut embedding = Tensor::randn(&[config.vocab_size, d], std, rng);
        embedding.data_mut()[..d].fill(0.0);
        let layers = (0..config.layers)
            .map(|_| LayerParams::new(d, config.ff_dim, rng))
            .collect();
        Self {
            embedding,
            layers,
            head: TransformerHead {
                positions: Tensor::randn(&[config.max_len, d], std, rng),
                cls_w: init(&[d, config.num_classes], rng),
                cls_b: Tensor::zeros(&[config.num_classes]),
            },
            config,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.extend(self.head.named().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        embeddings: Option<Var>,
        trainable: bool,
    ) -> Result<ForwardPass, ModelError> {
        let n = input.len();
        let d = self.config.d_model;
        if n > self.config.max_len {
            return Err(ModelError::TooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        if input.ids.first() != Some(&Vocab::CLS_ID) {
            return Err(ModelError::MissingCls);
        }
        let (x, table) = match embeddings {
            Some(v) => {
                check_features(tape, v, n, d)?;
                (v, None)
            }
            None => {
                check_ids(&input.ids, self.config.vocab_size)?;
                let table = if trainable {
                    tape.param(self.embedding.clone())
                } else {
                    tape.constant(self.embedding.clone())
                };
                (tape.gather(table, &input.ids)?, Some(table))
            }
        };
        let layers: Vec<BoundLayer> = self.layers.iter().map(|l| l.bind(tape, trainable)).collect();
        let head = self.head.bind(tape, trainable);

        let pos = tape.slice(head.positions, 0, 0, n)?;
        let mut h = tape.add(x, pos)?;
        let mask = input.key_mask(0..n);
        let mut captured = Vec::with_capacity(layers.len());
        for layer in &layers {
            let (next, maps) = self.layer(tape, layer, h, &mask)?;
            h = next;
            captured.push(maps);
        }
        let cls = tape.slice(h, 0, 0, 1)?;
        let z = tape.matmul(cls, head.cls_w)?;
        let z = tape.add(z, head.cls_b)?;
        let logits = tape.reshape(z, &[self.config.num_classes])?;

        let mut params = vec![table];
        for layer in &layers {
            params.extend(layer.vars().into_iter().map(Some));
        }
        params.extend(head.vars().into_iter().map(Some));
        Ok(ForwardPass {
            logits,
            attention: AttentionTrace::Transformer(AttentionStack {
                layers: captured,
                kinds: input.kinds.clone(),
                tokens: input.tokens.clone(),
                cls: 0,
            }),
            params,
        })
    }

    fn layer(
        &self,
        tape: &mut Tape,
        p: &BoundLayer,
        h: Var,
        mask: &[bool],
    ) -> Result<(Var, Vec<Tensor>), ModelError> {
        let n = mask.len();
        let dh = self.config.d_model / self.config.heads;
        let project = |tape: &mut Tape, w: Var, b: Var| -> Result<Var, ModelError> {
            let z = tape.matmul(h, w)?;
            Ok(tape.add(z, b)?)
        };
        let q = project(tape, p.wq, p.bq)?;
        let k = project(tape, p.wk, p.bk)?;
        let v = project(tape, p.wv, p.bv)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut maps = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let (lo, hi) = (i * dh, (i + 1) * dh);
            let vi = tape.slice(v, 1, lo, hi)?;
            let attn = match self.config.attention {
                AttentionMode::Softmax => {
                    let qi = tape.slice(q, 1, lo, hi)?;
                    let ki = tape.slice(k, 1, lo, hi)?;
                    let kt = tape.transpose(ki)?;
                    let scores = tape.matmul(qi, kt)?;
                    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                    tape.masked_softmax(scores, 1, Some(mask.to_vec()))?
                }
                AttentionMode::Uniform => {
                    let row = uniform_weights(mask).into_data();
                    let full = row.iter().cycle().take(n * n).copied().collect();
                    tape.constant(Tensor::matrix(n, n, full)?)
                }
            };
            maps.push(tape.value(attn).clone());
            heads.push(tape.matmul(attn, vi)?);
        }
        let merged = tape.concat(&heads, 1)?;
        let out = project_from(tape, merged, p.wo, p.bo)?;
        let res = tape.add(h, out)?;
        let h1 = tape.layernorm(res, p.ln1_g, p.ln1_b, LN_EPS)?;

        let ff = project_from(tape, h1, p.ff_w1, p.ff_b1)?;
        let ff = tape.tanh(ff);
        let ff = project_from(tape, ff, p.ff_w2, p.ff_b2)?;
        let res = tape.add(h1, ff)?;
        let h2 = tape.layernorm(res, p.ln2_g, p.ln2_b, LN_EPS)?;
        Ok((h2, maps))
    }
}

fn project_from(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let z = tape.matmul(x, w)?;
    Ok(tape.add(z, b)?)
}
