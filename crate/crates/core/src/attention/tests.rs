use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Split;
use crate::models::{RecurrentConfig, TransformerConfig, Vocab};

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Stack with `[CLS]` at position 0 and content everywhere else.
fn stack(layers: Vec<Vec<Tensor>>) -> AttentionStack {
    let n = layers[0][0].shape()[0];
    let mut kinds = vec![TokenKind::Content; n];
    kinds[0] = TokenKind::Special;
    AttentionStack {
        layers,
        kinds,
        tokens: (0..n).map(|i| format!("t{i}")).collect(),
        cls: 0,
    }
}

fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut rows = Vec::new();
    for _ in 0..n {
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = r.iter().sum();
        rows.push(r.iter().map(|v| v / s).collect());
    }
    Tensor::from_rows(&rows).unwrap()
}

fn random_stack(n: usize, layers: usize, heads: usize, seed: u64) -> AttentionStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stack(
        (0..layers)
            .map(|_| (0..heads).map(|_| random_stochastic(n, &mut rng)).collect())
            .collect(),
    )
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Breadth-first augmenting paths on a dense capacity matrix.
fn edmonds_karp(cap: &[Vec<f64>], s: usize, t: usize) -> f64 {
    let n = cap.len();
    let mut res = cap.to_vec();
    let mut total = 0.0;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[s] = s;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if prev[v] == usize::MAX && res[u][v] > 1e-15 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[t] == usize::MAX {
            return total;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = t;
        while v != s {
            bottleneck = bottleneck.min(res[prev[v]][v]);
            v = prev[v];
        }
        let mut v = t;
        while v != s {
            res[prev[v]][v] -= bottleneck;
            res[v][prev[v]] += bottleneck;
            v = prev[v];
        }
        total += bottleneck;
    }
}

fn oracle_flow(stack: &AttentionStack, cfg: &RolloutConfig) -> Vec<f64> {
    let mats = mixing_matrices(stack, cfg).unwrap();
    let n = stack.seq_len();
    let total = (mats.len() + 1) * n;
    let mut cap = vec![vec![0.0; total]; total];
    for (l, a) in mats.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                cap[(l + 1) * n + i][l * n + j] += a.get2(i, j);
            }
        }
    }
    let src = mats.len() * n + stack.cls;
    (1..n).map(|t| edmonds_karp(&cap, src, t)).collect()
}

#[test]
fn raw_attention_examples() {
    assert_eq!(raw_attention(&[vec![0.2, 0.5, 0.3]]), vec![0.2, 0.5, 0.3]);
    assert_eq!(raw_attention(&[vec![0.6, 0.4], vec![0.1, 0.9]]), vec![0.6, 0.4, 0.1, 0.9]);
}

#[test]
fn identity_attention_rolls_out_to_identity() {
    let id = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    let s = stack(vec![vec![id.clone()], vec![id.clone()]]);
    let r = rollout_matrix(&s, &RolloutConfig::default()).unwrap();
    assert_eq!(r, id);
    assert_eq!(r.row(0), &[1.0, 0.0, 0.0]);
    assert_eq!(attention_rollout(&s, &RolloutConfig::default()).unwrap(), vec![0.0, 0.0]);
    assert_eq!(attention_flow(&s, &RolloutConfig::default()).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn hand_computed_rollout() {
    let half = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
    let one = stack(vec![vec![half.clone()]]);
    let r = rollout_matrix(&one, &RolloutConfig::default()).unwrap();
    assert_eq!(r, m(&[&[0.75, 0.25], &[0.25, 0.75]]));
    assert_eq!(attention_rollout(&one, &RolloutConfig::default()).unwrap(), vec![0.25]);

    let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let two = stack(vec![vec![half], vec![id]]);
    let r = rollout_matrix(&two, &RolloutConfig::default()).unwrap();
    assert_eq!(r.row(0), &[0.75, 0.25]);
}

#[test]
fn full_residual_weight_gives_identity() {
    let s = random_stack(5, 3, 2, 1);
    let cfg = RolloutConfig {
        residual: 1.0,
        ..RolloutConfig::default()
    };
    let r = rollout_matrix(&s, &cfg).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(r.get2(i, j), if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn pipeline_order_golden_example() {
    // with max-aggregated heads, aggregating after normalizing would differ
    let a = m(&[&[0.9, 0.1, 0.0], &[0.2, 0.2, 0.6], &[0.3, 0.3, 0.4]]);
    let b = m(&[&[0.1, 0.1, 0.8], &[0.5, 0.4, 0.1], &[0.0, 1.0, 0.0]]);
    let s = stack(vec![vec![a, b]]);
    let cfg = RolloutConfig {
        residual: 0.5,
        heads: HeadAggregation::Max,
    };
    let r = rollout_matrix(&s, &cfg).unwrap();
    // max: row0 (.9,.1,.8); + residual → (.45+.5, .05, .4) = (.95,.05,.4), /1.4
    let expect = [0.95 / 1.4, 0.05 / 1.4, 0.4 / 1.4];
    assert!(close(r.row(0), &expect, 1e-15));
    let mean = rollout_matrix(&s, &RolloutConfig::default()).unwrap();
    assert!(close(mean.row(0), &[0.75, 0.05, 0.2], 1e-15));
}

#[test]
fn rollout_stays_row_stochastic() {
    for seed in 0..10 {
        let s = random_stack(7, 4, 3, seed);
        let r = rollout_matrix(&s, &RolloutConfig::default()).unwrap();
        for i in 0..7 {
            assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn single_layer_flow_equals_capacity() {
    let s = random_stack(5, 1, 2, 4);
    let cfg = RolloutConfig::default();
    let a = &mixing_matrices(&s, &cfg).unwrap()[0];
    let flow = attention_flow(&s, &cfg).unwrap();
    assert!(close(&flow, &a.row(0)[1..], 1e-12));
}

#[test]
fn flow_matches_independent_solver() {
    let three = stack(vec![
        vec![m(&[&[0.6, 0.3, 0.1], &[0.2, 0.5, 0.3], &[0.1, 0.1, 0.8]])],
        vec![m(&[&[0.2, 0.7, 0.1], &[0.4, 0.4, 0.2], &[0.3, 0.0, 0.7]])],
    ]);
    let cfg = RolloutConfig::default();
    let flow = attention_flow(&three, &cfg).unwrap();
    assert!(close(&flow, &oracle_flow(&three, &cfg), 1e-12), "{flow:?}");
    for seed in 0..10 {
        let s = random_stack(5, 3, 2, 100 + seed);
        let flow = attention_flow(&s, &cfg).unwrap();
        assert!(close(&flow, &oracle_flow(&s, &cfg), 1e-10));
    }
}

#[test]
fn flow_respects_cut_bounds() {
    let cfg = RolloutConfig::default();
    for seed in 0..10 {
        let s = random_stack(6, 3, 2, 200 + seed);
        let mats = mixing_matrices(&s, &cfg).unwrap();
        let flow = attention_flow(&s, &cfg).unwrap();
        for (k, f) in flow.iter().enumerate() {
            let t = k + 1;
            // cut around the sink: everything entering input token t
            let into_sink: f64 = (0..6).map(|i| mats[0].get2(i, t)).sum();
            assert!(*f <= 1.0 + 1e-12 && *f <= into_sink + 1e-12);
        }
    }
}

fn permute(stack: &AttentionStack, perm: &[usize]) -> AttentionStack {
    // new position p holds old position perm[p]
    let n = perm.len();
    let layers = stack
        .layers
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|a| {
                    let data = (0..n * n).map(|k| a.get2(perm[k / n], perm[k % n])).collect();
                    Tensor::matrix(n, n, data).unwrap()
                })
                .collect()
        })
        .collect();
    AttentionStack {
        layers,
        kinds: perm.iter().map(|&p| stack.kinds[p]).collect(),
        tokens: perm.iter().map(|&p| stack.tokens[p].clone()).collect(),
        cls: 0,
    }
}

#[test]
fn rollout_and_flow_are_permutation_equivariant() {
    use rand::seq::SliceRandom;
    let cfg = RolloutConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..5 {
        let s = random_stack(6, 3, 2, 300 + seed);
        let mut rest: Vec<usize> = (1..6).collect();
        rest.shuffle(&mut rng);
        let perm: Vec<usize> = std::iter::once(0).chain(rest).collect();
        let p = permute(&s, &perm);
        for f in [attention_rollout, attention_flow] {
            let before = f(&s, &cfg).unwrap();
            let after = f(&p, &cfg).unwrap();
            // content index k in the permuted stack is old position perm[k+1]
            let expect: Vec<f64> = (1..6).map(|q| before[perm[q] - 1]).collect();
            assert!(close(&after, &expect, 1e-14), "{after:?} {expect:?}");
        }
    }
}

#[test]
fn invalid_stacks_are_rejected() {
    let bad = stack(vec![vec![m(&[&[0.5, 0.6], &[0.5, 0.5]])]]);
    assert!(matches!(
        rollout_matrix(&bad, &RolloutConfig::default()),
        Err(AttentionError::NotRowStochastic { row: 0, .. })
    ));
    let ok = random_stack(3, 1, 1, 0);
    assert!(matches!(
        attention_flow(&ok, &RolloutConfig { residual: 1.5, ..RolloutConfig::default() }),
        Err(AttentionError::Residual(_))
    ));
    let empty = AttentionStack {
        layers: vec![],
        kinds: vec![],
        tokens: vec![],
        cls: 0,
    };
    assert!(matches!(attention_rollout(&empty, &RolloutConfig::default()), Err(AttentionError::Empty)));
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vocab() -> Vocab {
    Vocab::build(["a", "b", "c", "d"])
}

#[test]
fn model_level_explanations() {
    let rec = Model::recurrent(
        vocab(),
        RecurrentConfig {
            embed_dim: 4,
            hidden_dim: 3,
            attention_dim: 3,
            pair: true,
            ..RecurrentConfig::default()
        },
        &mut rng(0),
    );
    let inst = Instance::pair("p", &["a", "b"], &["c", "d", "a"], 0, Split::Test);
    let e = explain_with_attention(&rec, &inst, MethodId::RawAttention, &RolloutConfig::default()).unwrap();
    assert_eq!(e.tokens, vec!["a", "b", "c", "d", "a"]);
    assert!((e.scores[..2].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((e.scores[2..].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(!e.degenerate);

    let err = explain_with_attention(&rec, &inst, MethodId::AttentionRollout, &RolloutConfig::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("attention-rollout") && msg.contains("recurrent"), "{msg}");

    let mut uni = rec.clone();
    uni.set_attention_mode(AttentionMode::Uniform);
    let e = explain_with_attention(&uni, &inst, MethodId::RawAttention, &RolloutConfig::default()).unwrap();
    assert!(e.degenerate);
    assert_eq!(e.scores, vec![0.5, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);

    let tr = Model::transformer(
        vocab(),
        TransformerConfig {
            d_model: 4,
            heads: 2,
            layers: 2,
            ff_dim: 4,
            max_len: 10,
            pair: true,
            ..TransformerConfig::default()
        },
        &mut rng(1),
    );
    for method in [MethodId::AttentionRollout, MethodId::AttentionFlow] {
        let e = explain_with_attention(&tr, &inst, method, &RolloutConfig::default()).unwrap();
        assert_eq!(e.tokens, vec!["a", "b", "c", "d", "a"]);
        assert!(e.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    let err = explain_with_attention(&tr, &inst, MethodId::RawAttention, &RolloutConfig::default()).unwrap_err();
    assert!(err.to_string().contains("transformer"));
}
