use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::param_group;
use super::{
    check_features, check_ids, init, AttentionMode, AttentionTrace, ForwardPass, ModelError, ModelInput,
    PairContext, RecurrentAttention, TokenKind,
};
use crate::autodiff::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size of each LSTM direction.
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub num_classes: usize,
    pub pair: bool,
    #[serde(default)]
    pub attention: AttentionMode,
}

impl Default for RecurrentConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 64,
            hidden_dim: 32,
            attention_dim: 32,
            num_classes: 2,
            pair: false,
            attention: AttentionMode::Softmax,
        }
    }
}

impl RecurrentConfig {
    /// 300-dim embeddings and a 128-dim encoder state per direction.
    pub fn full_size() -> Self {
        Self {
            embed_dim: 300,
            hidden_dim: 128,
            attention_dim: 128,
            ..Self::default()
        }
    }
}

param_group!(
    /// One LSTM direction; gate blocks ordered input, forget, cell, output.
    LstmParams => BoundLstm { w_x, w_h, b }
);

param_group!(
    /// Additive attention `v·tanh(W h)` and the linear decoder.
    RecurrentHead => BoundRecurrentHead { att_w, att_v, dec_w, dec_b }
);

impl LstmParams {
    fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w_x: init(&[input, 4 * hidden], rng),
            w_h: init(&[hidden, 4 * hidden], rng),
            b,
        }
    }
}

/// Single-layer bidirectional LSTM encoder, additive tanh attention over the
/// encoder states, linear decoder. Pair inputs are encoded separately with
/// shared weights and decoded from `[c1; c2; |c1 − c2|; c1 ⊙ c2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentAttnClassifier {
    pub config: RecurrentConfig,
    pub embedding: Tensor,
    pub forward_cell: LstmParams,
    pub backward_cell: LstmParams,
    pub head: RecurrentHead,
}

struct Bound {
    fwd: BoundLstm,
    bwd: BoundLstm,
    head: BoundRecurrentHead,
}

impl RecurrentAttnClassifier {
    pub fn new<R: Rng + ?Sized>(config: RecurrentConfig, rng: &mut R) -> Self {
        let (e, h, a) = (config.embed_dim, config.hidden_dim, config.attention_dim);
        let mut embedding = Tensor::randn(&[config.vocab_size, e], 1.0, rng);
        embedding.data_mut()[..e].fill(0.0);
        let dec_in = if config.pair { 8 * h } else { 2 * h };
        Self {
            embedding,
            forward_cell: LstmParams::new(e, h, rng),
            backward_cell: LstmParams::new(e, h, rng),
            head: RecurrentHead {
                att_w: init(&[2 * h, a], rng),
                att_v: init(&[a, 1], rng),
                dec_w: init(&[dec_in, config.num_classes], rng),
                dec_b: Tensor::zeros(&[config.num_classes]),
            },
            config,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (prefix, group) in [("forward_cell", &self.forward_cell), ("backward_cell", &self.backward_cell)] {
            out.extend(group.named().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.extend(self.head.named().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.forward_cell.tensors_mut());
        out.extend(self.backward_cell.tensors_mut());
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
        let expected_segments = if self.config.pair { 2 } else { 1 };
        if input.segments.len() != expected_segments {
            use crate::data::TaskType::{Pair, Single};
            let (expected, got) = if self.config.pair { (Pair, Single) } else { (Single, Pair) };
            return Err(ModelError::TaskMismatch { expected, got });
        }
        let (x, table) = match embeddings {
            Some(v) => {
                check_features(tape, v, input.len(), self.config.embed_dim)?;
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
        let bound = Bound {
            fwd: self.forward_cell.bind(tape, trainable),
            bwd: self.backward_cell.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        };

        let mut contexts = Vec::new();
        let mut alphas = Vec::new();
        for (s, range) in input.segments.iter().enumerate() {
            // trailing pads are not encoded at all
            let end = (range.start..range.end)
                .rev()
                .find(|&i| input.kinds[i] != TokenKind::Pad)
                .map(|i| i + 1)
                .ok_or(ModelError::EmptySequence { segment: s })?;
            let seq = tape.slice(x, 0, range.start, end)?;
            let states = self.encode(tape, &bound, seq, end - range.start)?;
            let mask = input.key_mask(range.start..end);
            let (context, mut alpha) = self.attend(tape, &bound.head, states, mask)?;
            alpha.resize(range.len(), 0.0);
            alphas.push(alpha);
            contexts.push(context);
        }

        let (dec_in, pair) = if let [c1, c2] = contexts[..] {
            let diff = tape.sub(c1, c2)?;
            let abs = tape.abs(diff);
            let prod = tape.mul(c1, c2)?;
            let pair = PairContext {
                c1: tape.value(c1).data().to_vec(),
                c2: tape.value(c2).data().to_vec(),
            };
            (tape.concat(&[c1, c2, abs, prod], 1)?, Some(pair))
        } else {
            (contexts[0], None)
        };
        let z = tape.matmul(dec_in, bound.head.dec_w)?;
        let z = tape.add(z, bound.head.dec_b)?;
        let logits = tape.reshape(z, &[self.config.num_classes])?;

        let mut params = vec![table];
        params.extend(bound.fwd.vars().into_iter().map(Some));
        params.extend(bound.bwd.vars().into_iter().map(Some));
        params.extend(bound.head.vars().into_iter().map(Some));
        Ok(ForwardPass {
            logits,
            attention: AttentionTrace::Recurrent(RecurrentAttention {
                alphas,
                pair,
                mode: self.config.attention,
            }),
            params,
        })
    }

    /// `[len, 2h]` concatenated forward/backward hidden states.
    fn encode(&self, tape: &mut Tape, bound: &Bound, seq: Var, len: usize) -> Result<Var, ModelError> {
        let fwd = self.run_direction(tape, &bound.fwd, seq, len, false)?;
        let bwd = self.run_direction(tape, &bound.bwd, seq, len, true)?;
        Ok(tape.concat(&[fwd, bwd], 1)?)
    }

    fn run_direction(
        &self,
        tape: &mut Tape,
        cell: &BoundLstm,
        seq: Var,
        len: usize,
        reverse: bool,
    ) -> Result<Var, ModelError> {
        let h_dim = self.config.hidden_dim;
        let projected = tape.matmul(seq, cell.w_x)?;
        let projected = tape.add(projected, cell.b)?;
        let mut h = tape.constant(Tensor::zeros(&[1, h_dim]));
        let mut c = tape.constant(Tensor::zeros(&[1, h_dim]));
        let mut outputs = vec![h; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let x_t = tape.slice(projected, 0, t, t + 1)?;
            let rec = tape.matmul(h, cell.w_h)?;
            let z = tape.add(x_t, rec)?;
            let gate = |tape: &mut Tape, k: usize| tape.slice(z, 1, k * h_dim, (k + 1) * h_dim);
            let i = gate(tape, 0)?;
            let i = tape.sigmoid(i);
            let f = gate(tape, 1)?;
            let f = tape.sigmoid(f);
            let g = gate(tape, 2)?;
            let g = tape.tanh(g);
            let o = gate(tape, 3)?;
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c);
            h = tape.mul(o, squashed)?;
            outputs[t] = h;
        }
        Ok(tape.concat(&outputs, 0)?)
    }

    /// Context vector `[1, 2h]` and the attention weights over `states`.
    fn attend(
        &self,
        tape: &mut Tape,
        head: &BoundRecurrentHead,
        states: Var,
        mask: Vec<bool>,
    ) -> Result<(Var, Vec<f64>), ModelError> {
        let len = mask.len();
        let alpha = match self.config.attention {
            AttentionMode::Softmax => {
                let proj = tape.matmul(states, head.att_w)?;
                let proj = tape.tanh(proj);
                let scores = tape.matmul(proj, head.att_v)?;
                let scores = tape.reshape(scores, &[len])?;
                tape.masked_softmax(scores, 0, Some(mask))?
            }
            AttentionMode::Uniform => tape.constant(uniform_weights(&mask)),
        };
        let weights = tape.value(alpha).data().to_vec();
        let row = tape.reshape(alpha, &[1, len])?;
        Ok((tape.matmul(row, states)?, weights))
    }
}

/// `1/n` on each of the `n` unmasked positions.
pub(crate) fn uniform_weights(mask: &[bool]) -> Tensor {
    let n = mask.iter().filter(|&&k| k).count();
    Tensor::vector(mask.iter().map(|&k| if k { 1.0 / n as f64 } else { 0.0 }).collect())
}
