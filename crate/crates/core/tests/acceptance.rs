//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 5 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use concord::agreement::{kendall_tau_b, summarize, AgreementMatrix, Grouping, Scope, DEFAULT_EXCLUSIONS};
use concord::attention::{attention_flow, attention_rollout, mixing_matrices, rollout_matrix, RolloutConfig};
use concord::attribution::{
    deep_shap, deeplift, exact_shapley, grad_shap, integrated_gradients, lime, Aggregation, AttributionError, GradShapConfig, IgConfig,
    LimeConfig, MethodId, Scorer, Subject,
};
use concord::autodiff::{Tape, Tensor, Var};
use concord::data::{Instance, Split, TaskType};
use concord::harness::{
    run_ablation, run_agreement_experiment, train_run, write_agreement_outputs, ExperimentConfig, ModelFamily, SyntheticTask,
};
use concord::models::{AttentionMode, AttentionStack, Model, RecurrentConfig, TokenKind, TransformerConfig, Vocab};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---- 1: reverse mode vs central differences -----------------------------------

/// One step of a random composite graph.
#[derive(Clone, Copy, Debug)]
enum Op {
    Tanh,
    Sigmoid,
    Exp,
    Softmax,
    LogSigmoid,
    MatMul,
    Mul,
    Add,
    LayerNorm,
    Transpose,
}

const OPS: [Op; 10] = [
    Op::Tanh,
    Op::Sigmoid,
    Op::Exp,
    Op::Softmax,
    Op::LogSigmoid,
    Op::MatMul,
    Op::Mul,
    Op::Add,
    Op::LayerNorm,
    Op::Transpose,
];

/// A random graph: the input shape, the op sequence, and every extra
/// parameter tensor the ops consume, in order.
struct Graph {
    ops: Vec<Op>,
    inputs: Vec<Tensor>,
    readout: Tensor,
}

fn random_graph(r: &mut ChaCha8Rng) -> Graph {
    let (mut rows, mut cols) = (r.random_range(1..=8), r.random_range(1..=8));
    let mut inputs = vec![Tensor::randn(&[rows, cols], 0.8, r)];
    let depth = r.random_range(1..=4);
    let mut ops = Vec::new();
    for _ in 0..depth {
        let op = OPS[r.random_range(0..OPS.len())];
        match op {
            Op::MatMul => {
                let k = r.random_range(1..=8);
                inputs.push(Tensor::randn(&[cols, k], 0.5, r));
                cols = k;
            }
            Op::Mul | Op::Add => inputs.push(Tensor::randn(&[rows, cols], 0.8, r)),
            Op::LayerNorm => {
                inputs.push(Tensor::randn(&[cols], 1.0, r));
                inputs.push(Tensor::randn(&[cols], 0.5, r));
            }
            Op::Transpose => std::mem::swap(&mut rows, &mut cols),
            _ => {}
        }
        ops.push(op);
    }
    Graph {
        ops,
        inputs,
        readout: Tensor::randn(&[rows, cols], 1.0, r),
    }
}

fn build(graph: &Graph, tape: &mut Tape, vars: &[Var]) -> Var {
    let mut next = 1;
    let mut take = || {
        next += 1;
        vars[next - 1]
    };
    let mut h = vars[0];
    for op in &graph.ops {
        h = match op {
            Op::Tanh => tape.tanh(h),
            Op::Sigmoid => tape.sigmoid(h),
            Op::Exp => {
                let s = tape.scale(h, 0.5);
                tape.exp(s)
            }
            Op::Softmax => tape.softmax(h, 1).unwrap(),
            Op::LogSigmoid => {
                let s = tape.sigmoid(h);
                tape.log(s).unwrap()
            }
            Op::MatMul => tape.matmul(h, take()).unwrap(),
            Op::Mul => tape.mul(h, take()).unwrap(),
            Op::Add => tape.add(h, take()).unwrap(),
            Op::LayerNorm => {
                let (g, b) = (take(), take());
                tape.layernorm(h, g, b, 1e-5).unwrap()
            }
            Op::Transpose => tape.transpose(h).unwrap(),
        };
    }
    let w = tape.constant(graph.readout.clone());
    let p = tape.mul(h, w).unwrap();
    tape.sum(p)
}

fn graph_value(graph: &Graph, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(graph, &mut tape, &vars);
    tape.value(out).item().unwrap()
}

fn criterion_1() {
    let started = Instant::now();
    let mut r = rng(2024);
    let h = 1e-5;
    for trial in 0..50 {
        let graph = random_graph(&mut r);
        let mut tape = Tape::new();
        let vars: Vec<Var> = graph.inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&graph, &mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (vi, input) in graph.inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[vi]);
            for j in 0..input.len() {
                let mut plus = graph.inputs.clone();
                plus[vi].data_mut()[j] += h;
                let mut minus = graph.inputs.clone();
                minus[vi].data_mut()[j] -= h;
                let numeric = (graph_value(&graph, &plus) - graph_value(&graph, &minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
                assert!(rel < 1e-4, "graph {trial} {:?}: input {vi}[{j}] {a} vs {numeric}", graph.ops);
            }
        }
    }
    assert!(started.elapsed() < Duration::from_secs(10), "took {:?}", started.elapsed());
}

// ---- 2: Integrated Gradients completeness ----------------------------------------

fn words() -> Vec<String> {
    (0..10).map(|i| format!("w{i}")).collect()
}

fn toy_transformer() -> Model {
    let w = words();
    let cfg = TransformerConfig {
        d_model: 8,
        heads: 4,
        layers: 3,
        ff_dim: 16,
        max_len: 16,
        ..TransformerConfig::default()
    };
    Model::transformer(Vocab::build(w.iter().map(String::as_str)), cfg, &mut rng(21))
}

fn toy_recurrent() -> Model {
    let w = words();
    let cfg = RecurrentConfig {
        embed_dim: 6,
        hidden_dim: 5,
        attention_dim: 4,
        ..RecurrentConfig::default()
    };
    Model::recurrent(Vocab::build(w.iter().map(String::as_str)), cfg, &mut rng(22))
}

fn random_instance(r: &mut ChaCha8Rng, i: usize) -> Instance {
    let w = words();
    let len = r.random_range(1..=10);
    let toks: Vec<&str> = (0..len).map(|_| w[r.random_range(0..w.len())].as_str()).collect();
    Instance::single(format!("i{i}"), &toks, 0, Split::Test)
}

fn criterion_2() {
    let model = toy_transformer();
    let mut r = rng(7);
    for i in 0..20 {
        let instance = random_instance(&mut r, i);
        let s = Subject::from_model(&model, &instance).unwrap();
        assert!(s.num_positions() <= 12);
        let b = s.pad_baseline();
        let e = integrated_gradients(&s, None, &b, &IgConfig { steps: 256, ..IgConfig::default() }).unwrap();
        let delta = s.output_at(&s.embeddings, e.target).unwrap() - s.output_at(&b, e.target).unwrap();
        let gap = (e.scores.iter().sum::<f64>() - delta).abs();
        assert!(gap < 1e-3 * delta.abs() + 1e-6, "instance {i}: |Σ − Δ| = {gap}, Δ = {delta}");
    }
}

// ---- 3: DeepLIFT summation-to-delta ---------------------------------------------

/// A graph built only from ops the rescale rule handles.
struct LiftGraph {
    ops: Vec<usize>,
    weights: Vec<Tensor>,
}

fn random_lift_graph(r: &mut ChaCha8Rng, d: usize) -> LiftGraph {
    let depth = r.random_range(2..=5);
    let ops: Vec<usize> = (0..depth).map(|_| r.random_range(0..7)).collect();
    let weights = vec![
        Tensor::randn(&[d, d], 0.8, r),
        Tensor::randn(&[d], 1.0, r),
        Tensor::randn(&[d], 0.5, r),
        Tensor::randn(&[d, 1], 1.0, r),
    ];
    LiftGraph { ops, weights }
}

fn lift_forward(g: &LiftGraph, tape: &mut Tape, x: Var) -> Var {
    let w = tape.constant(g.weights[0].clone());
    let gamma = tape.constant(g.weights[1].clone());
    let beta = tape.constant(g.weights[2].clone());
    let head = tape.constant(g.weights[3].clone());
    let mut h = x;
    for &op in &g.ops {
        h = match op {
            0 => tape.matmul(h, w).unwrap(),
            1 => tape.tanh(h),
            2 => tape.sigmoid(h),
            3 => tape.softmax(h, 1).unwrap(),
            4 => tape.layernorm(h, gamma, beta, 1e-5).unwrap(),
            5 => {
                let gate = tape.sigmoid(h);
                tape.mul(gate, h).unwrap()
            }
            _ => {
                let ht = tape.transpose(h).unwrap();
                let scores = tape.matmul(h, ht).unwrap();
                let attn = tape.softmax(scores, 1).unwrap();
                tape.matmul(attn, h).unwrap()
            }
        };
    }
    let o = tape.matmul(h, head).unwrap();
    tape.sum(o)
}

fn criterion_3() {
    let mut r = rng(33);
    for trial in 0..20 {
        let (n, d) = (r.random_range(1..=6), r.random_range(2..=5));
        let g = random_lift_graph(&mut r, d);
        let x = Tensor::randn(&[n, d], 1.0, &mut r);
        let xr = Tensor::randn(&[n, d], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = lift_forward(&g, &mut tape, xv);
        let mut reference = Tape::new();
        let xrv = reference.constant(xr.clone());
        let out_r = lift_forward(&g, &mut reference, xrv);
        let m = tape.deeplift(&reference, out).unwrap().wrt(xv);
        let attributed: f64 = (0..x.len()).map(|i| m.data()[i] * (x.data()[i] - xr.data()[i])).sum();
        let delta = tape.value(out).item().unwrap() - reference.value(out_r).item().unwrap();
        assert!((attributed - delta).abs() < 1e-6, "graph {trial} {:?}: {attributed} vs {delta}", g.ops);
    }

    let mut r = rng(34);
    for model in [toy_transformer(), toy_recurrent()] {
        for i in 0..5 {
            let instance = random_instance(&mut r, i);
            let s = Subject::from_model(&model, &instance).unwrap();
            let b = s.pad_baseline();
            let dl = deeplift(&s, None, &b, Aggregation::Sum).unwrap();
            let delta = s.output_at(&s.embeddings, dl.target).unwrap() - s.output_at(&b, dl.target).unwrap();
            assert!((dl.scores.iter().sum::<f64>() - delta).abs() < 1e-6, "{} instance {i}", model.family());
            let ds = deep_shap(&s, None, std::slice::from_ref(&b), Aggregation::Sum).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&dl.scores), bits(&ds.scores), "{} instance {i}", model.family());
        }
    }
}

// ---- 4: Shapley oracle -------------------------------------------------------------

/// Two logits `±(Σ w ⊙ x + c)`; linear in the mask because masking swaps a
/// row for the pad vector.
struct Linear {
    w: Tensor,
    c: f64,
}

impl Scorer for Linear {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var, AttributionError> {
        let w = tape.constant(self.w.clone());
        let prod = tape.mul(x, w)?;
        let s = tape.sum(prod);
        let c = tape.constant(Tensor::scalar(self.c));
        let s = tape.add(s, c)?;
        let s = tape.reshape(s, &[1])?;
        let neg = tape.scale(s, -1.0);
        Ok(tape.concat(&[s, neg], 0)?)
    }
}

/// Token contributions are shuffled, well-separated, non-zero levels.
fn linear_subject(n: usize, r: &mut ChaCha8Rng) -> (Subject<Linear>, Vec<f64>) {
    let d = 2;
    let mut levels: Vec<f64> = (0..n).map(|k| 0.4 * (k + 1) as f64 * if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    levels.shuffle(r);
    let x: Vec<f64> = (0..n * d).map(|_| r.random_range(0.5..1.5)).collect();
    let w: Vec<f64> = (0..n * d).map(|k| levels[k / d] / (d as f64 * x[k])).collect();
    let subject = Subject {
        id: "linear".into(),
        tokens: (0..n).map(|i| format!("t{i}")).collect(),
        features: (0..n).collect(),
        embeddings: Tensor::matrix(n, d, x).unwrap(),
        pad: vec![0.0; d],
        scorer: Linear {
            w: Tensor::matrix(n, d, w).unwrap(),
            c: 0.25,
        },
    };
    (subject, levels)
}

fn criterion_4() {
    let mut r = rng(44);
    for n in 2..=10usize {
        for rep in 0..3u64 {
            let (s, _) = linear_subject(n, &mut r);
            let value = |mask: u32| s.output_at(&s.masked((0..n).filter(|i| mask & (1 << i) == 0)), 0).unwrap();
            let phi = exact_shapley(value, n).unwrap();
            let b = s.pad_baseline();

            let gs = grad_shap(&s, Some(0), std::slice::from_ref(&b), &GradShapConfig { samples: 2000, seed: rep, ..GradShapConfig::default() }).unwrap();
            for (i, (g, p)) in gs.scores.iter().zip(&phi).enumerate() {
                assert!((g - p).abs() <= 0.05 * p.abs(), "n={n} token {i}: Grad-SHAP {g} vs {p}");
            }

            let ds = deep_shap(&s, Some(0), std::slice::from_ref(&b), Aggregation::Sum).unwrap();
            for (i, (v, p)) in ds.scores.iter().zip(&phi).enumerate() {
                assert!((v - p).abs() <= 1e-8, "n={n} token {i}: Deep-SHAP {v} vs {p}");
            }

            let lm = lime(&s, Some(0), &LimeConfig { samples: 1000, seed: rep, ..LimeConfig::default() }).unwrap();
            let tau = kendall_tau_b(&lm.scores, &phi).unwrap();
            assert_eq!(tau, Some(1.0), "n={n}: LIME {:?} vs {phi:?}", lm.scores);
        }
    }
}

// ---- 5: Kendall τ-b vs pair counting ---------------------------------------------

fn sign(v: f64) -> i64 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// O(n²) τ-b; `None` when either side has no untied pair.
fn brute_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut s, mut tx, mut ty, mut pairs) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (a, b) = (sign(x[i] - x[j]), sign(y[i] - y[j]));
            s += a * b;
            tx += (a == 0) as i64;
            ty += (b == 0) as i64;
            pairs += 1;
        }
    }
    let (dx, dy) = (pairs - tx, pairs - ty);
    (dx > 0 && dy > 0).then(|| s as f64 / ((dx as f64) * (dy as f64)).sqrt())
}

fn permutations(n: usize) -> Vec<Vec<f64>> {
    fn heap(k: usize, a: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).map(|v| v as f64).collect(), &mut out);
    out
}

fn criterion_5() {
    for n in 2..=6 {
        let perms = permutations(n);
        let expected: usize = (1..=n).product();
        assert_eq!(perms.len(), expected);
        let started = Instant::now();
        for x in &perms {
            for y in &perms {
                let got = kendall_tau_b(x, y).unwrap().unwrap();
                let want = brute_tau_b(x, y).unwrap();
                assert!((got - want).abs() <= 1e-12, "{x:?} {y:?}: {got} vs {want}");
            }
        }
        assert!(started.elapsed() < Duration::from_secs(1), "n={n} took {:?}", started.elapsed());
    }

    let mut r = rng(55);
    for _ in 0..1000 {
        let n = r.random_range(2..=20);
        let levels = r.random_range(1..=5);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 * 0.5 - 1.0).collect();
        let got = kendall_tau_b(&x, &y).unwrap();
        match (got, brute_tau_b(&x, &y)) {
            (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-12, "{x:?} {y:?}: {g} vs {w}"),
            (None, None) => {}
            (g, w) => panic!("{x:?} {y:?}: {g:?} vs {w:?}"),
        }
    }
}

// ---- 6: rollout and flow golden examples -----------------------------------------

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// `[CLS]` at position 0, content elsewhere.
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

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert!(
        got.len() == want.len() && got.iter().zip(want).all(|(a, b)| (a - b).abs() <= tol),
        "{what}: {got:?} vs {want:?}"
    );
}

fn criterion_6() {
    let cfg = RolloutConfig::default();

    // 2 tokens. Ã1 = ½I + ½A1 = [[.75,.25],[.25,.75]], Ã2 = [[.6,.4],[.3,.7]].
    let a1 = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
    let a2 = m(&[&[0.2, 0.8], &[0.6, 0.4]]);
    let one = stack(vec![vec![a1.clone()]]);
    assert_close(&attention_rollout(&one, &cfg).unwrap(), &[0.25], 1e-12, "2-token rollout, 1 layer");
    assert_close(&attention_flow(&one, &cfg).unwrap(), &[0.25], 1e-12, "2-token flow, 1 layer");
    let two = stack(vec![vec![a1], vec![a2]]);
    // row 0 of Ã2·Ã1: .6·(.75,.25) + .4·(.25,.75) = (.55,.45)
    assert_close(&attention_rollout(&two, &cfg).unwrap(), &[0.45], 1e-12, "2-token rollout, 2 layers");
    // paths CLS→0→1 carry min(.6,.25), CLS→1→1 carry min(.4,.75)
    assert_close(&attention_flow(&two, &cfg).unwrap(), &[0.65], 1e-12, "2-token flow, 2 layers");

    // 3 tokens. Ã1 rows (.6,.15,.25), (.05,.9,.05), (.2,.2,.6);
    // Ã2 rows (.5,.25,.25), (.5,.5,0), (0,0,1).
    let a1 = m(&[&[0.2, 0.3, 0.5], &[0.1, 0.8, 0.1], &[0.4, 0.4, 0.2]]);
    let a2 = m(&[&[0.0, 0.5, 0.5], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
    let one = stack(vec![vec![a1.clone()]]);
    assert_close(&attention_rollout(&one, &cfg).unwrap(), &[0.15, 0.25], 1e-12, "3-token rollout, 1 layer");
    assert_close(&attention_flow(&one, &cfg).unwrap(), &[0.15, 0.25], 1e-12, "3-token flow, 1 layer");
    let two = stack(vec![vec![a1], vec![a2]]);
    // .5·(.6,.15,.25) + .25·(.05,.9,.05) + .25·(.2,.2,.6)
    assert_close(&attention_rollout(&two, &cfg).unwrap(), &[0.35, 0.2875], 1e-12, "3-token rollout, 2 layers");
    // token 1: min(.5,.15) + min(.25,.9) + min(.25,.2); token 2: min(.5,.25) + min(.25,.05) + min(.25,.6)
    assert_close(&attention_flow(&two, &cfg).unwrap(), &[0.6, 0.55], 1e-12, "3-token flow, 2 layers");

    // two heads averaged before the residual: mean row 0 is (.1,.6,.3)
    let h1 = m(&[&[0.2, 0.8, 0.0], &[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]]);
    let h2 = m(&[&[0.0, 0.4, 0.6], &[0.3, 0.3, 0.4], &[1.0, 0.0, 0.0]]);
    let heads = stack(vec![vec![h1, h2]]);
    assert_close(&attention_rollout(&heads, &cfg).unwrap(), &[0.3, 0.15], 1e-12, "3-token rollout, 2 heads");

    let mut r = rng(66);
    let random = |r: &mut ChaCha8Rng, n: usize| {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    for _ in 0..10 {
        let n = r.random_range(2..=8);
        let single = stack(vec![vec![random(&mut r, n), random(&mut r, n)]]);
        let capacity = &mixing_matrices(&single, &cfg).unwrap()[0];
        assert_close(&attention_flow(&single, &cfg).unwrap(), &capacity.row(0)[1..], 1e-12, "single-layer flow vs capacity row");

        let layers = r.random_range(1..=4);
        let deep = stack((0..layers).map(|_| vec![random(&mut r, n), random(&mut r, n)]).collect());
        let identity = RolloutConfig { residual: 1.0, ..cfg };
        let rolled = rollout_matrix(&deep, &identity).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(rolled.get2(i, j), if i == j { 1.0 } else { 0.0 }, "residual weight 1 at ({i},{j})");
            }
        }
        assert!(attention_rollout(&deep, &identity).unwrap().iter().all(|&v| v == 0.0));
    }
}

// ---- 7: aggregation of the published agreement tables ----------------------------

/// Attention row, then LIME, IG, DeepLIFT, Grad-SHAP, in row order.
const RECURRENT: [(&str, TaskType, [f64; 15]); 5] = [
    ("MNLI", TaskType::Pair, [0.1958, 0.2523, 0.2549, 0.2473, 0.2370, 0.3281, 0.2444, 0.3187, 0.2269, 0.4984, 0.8138, 0.4021, 0.4987, 0.6208, 0.4015]),
    ("Quora", TaskType::Pair, [0.0363, 0.0143, 0.0894, 0.0182, 0.1017, 0.2099, 0.1900, 0.2037, 0.1670, 0.2906, 0.7420, 0.2290, 0.3158, 0.6179, 0.2433]),
    ("SNLI", TaskType::Pair, [0.2198, 0.2566, 0.3158, 0.2517, 0.2938, 0.2673, 0.1676, 0.2481, 0.1566, 0.2461, 0.6535, 0.2165, 0.2557, 0.5791, 0.2219]),
    ("IMDb", TaskType::Single, [0.2014, 0.2188, 0.2494, 0.2209, 0.2309, 0.6538, 0.5854, 0.6486, 0.5584, 0.7331, 0.9409, 0.6994, 0.7378, 0.8593, 0.7021]),
    ("SST-2", TaskType::Single, [0.1326, 0.1093, 0.1372, 0.1101, 0.1400, 0.4968, 0.4734, 0.4962, 0.4422, 0.8683, 0.9707, 0.8063, 0.8682, 0.8729, 0.8056]),
];
const TRANSFORMER: [(&str, TaskType, [f64; 15]); 5] = [
    ("MNLI", TaskType::Pair, [0.2678, 0.1891, 0.2432, 0.1905, 0.2067, 0.1794, 0.1526, 0.1592, 0.1205, 0.2153, 0.4780, 0.1708, 0.2324, 0.4985, 0.1752]),
    ("Quora", TaskType::Pair, [0.1622, 0.0574, 0.2267, 0.0518, 0.2257, 0.1407, 0.0032, 0.1144, 0.0095, 0.0625, 0.4674, 0.0529, 0.0637, 0.5951, 0.0535]),
    ("SNLI", TaskType::Pair, [0.1434, 0.1645, 0.2214, 0.1600, 0.1796, 0.1529, 0.0925, 0.1104, 0.0593, 0.0955, 0.3932, 0.0700, 0.1181, 0.5554, 0.0851]),
    ("IMDb", TaskType::Single, [0.1259, 0.1818, 0.2516, 0.1432, 0.2303, 0.1050, 0.0696, 0.0929, 0.0655, 0.1433, 0.5495, 0.1246, 0.1306, 0.4830, 0.1093]),
    ("SST-2", TaskType::Single, [0.1359, 0.0511, 0.1328, 0.0737, 0.1291, 0.2861, 0.0618, 0.2414, 0.0499, 0.0498, 0.4987, 0.0381, 0.0522, 0.4514, 0.0419]),
];

fn criterion_7() {
    let started = Instant::now();
    let mut matrices = Vec::new();
    for (model, attention, table) in [("BiLSTM", MethodId::RawAttention, &RECURRENT), ("DistilBERT", MethodId::AttentionRollout, &TRANSFORMER)] {
        let methods = [attention, MethodId::Lime, MethodId::IntegratedGradients, MethodId::Deeplift, MethodId::GradShap, MethodId::DeepShap];
        for (name, task, means) in table {
            matrices.push(AgreementMatrix::from_means(name, model, *task, &methods, means, &DEFAULT_EXCLUSIONS).unwrap());
        }
    }
    let check = |what: &str, got: f64, want: f64| assert!((got - want).abs() <= 0.005, "{what}: {got:.4} vs {want}");
    let overall = |scope| summarize(&matrices, Grouping::Overall, scope).unwrap()[0].mean;
    check("non-attention pairs", overall(Scope::NonAttention), 0.2684);
    check("attention rows", overall(Scope::Attention), 0.1736);
    let by_model = summarize(&matrices, Grouping::ByModel, Scope::NonAttention).unwrap();
    assert_eq!((by_model[0].group.as_str(), by_model[1].group.as_str()), ("BiLSTM", "DistilBERT"));
    check("BiLSTM non-attention", by_model[0].mean, 0.4281);
    check("DistilBERT non-attention", by_model[1].mean, 0.1088);
    let by_task = summarize(&matrices, Grouping::ByTaskType, Scope::All).unwrap();
    assert_eq!((by_task[0].group.as_str(), by_task[1].group.as_str()), ("single", "pair"));
    check("single-sequence", by_task[0].mean, 0.273);
    check("pair-sequence", by_task[1].mean, 0.1883);
    assert!(started.elapsed() < Duration::from_secs(1));
}

// ---- 8: softmax vs uniform attention ---------------------------------------------

fn criterion_8() {
    let started = Instant::now();
    let mut gaps = Vec::new();
    for task in ["needle", "bag-of-words"] {
        let config = ExperimentConfig::load(&repo_root().join(format!("configs/ablation-{task}.toml"))).unwrap();
        assert_eq!(config.training.seeds.len(), 3);
        let data = config.dataset.load().unwrap();
        let (report, _) = run_ablation(&config, &data).unwrap();
        eprintln!(
            "  {task}: softmax {:.4} {:?}, uniform {:.4} {:?}, gap {:+.4}",
            report.softmax.mean, report.softmax.test_accuracy, report.uniform.mean, report.uniform.test_accuracy, report.gap
        );
        gaps.push(report.gap);
    }
    assert!(gaps[0] >= 0.10, "needle gap {:.4} < 0.10", gaps[0]);
    assert!(gaps[1].abs() <= 0.03, "bag-of-words gap {:.4} exceeds 0.03", gaps[1]);
    assert!(started.elapsed() < Duration::from_secs(600), "took {:?}", started.elapsed());
}

// ---- 9 and 10: end-to-end agreement runs -------------------------------------------

fn small_agreement_config(family: ModelFamily) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.dataset.synthetic = Some(SyntheticTask::OverlapPair);
    config.dataset.size = Some(200);
    config.dataset.seed = 3;
    config.model.family = family;
    config.model.recurrent.embed_dim = 8;
    config.model.recurrent.hidden_dim = 6;
    config.model.recurrent.attention_dim = 6;
    config.model.transformer.d_model = 8;
    config.model.transformer.heads = 2;
    config.model.transformer.layers = 2;
    config.model.transformer.ff_dim = 16;
    config.training.max_epochs = 3;
    config.training.patience = 1;
    config.training.seeds = vec![4];
    config.explain.sample_size = 12;
    config.explain.seed = 9;
    config.explain.lime.samples = 200;
    config.explain.grad_shap.samples = 16;
    config.validate().unwrap();
    config
}

/// Trains, explains and writes every output into `dir`; returns the files.
fn agreement_run(config: &ExperimentConfig, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let data = config.dataset.load().unwrap();
    let run = train_run(config, &data, AttentionMode::Softmax, config.training.seeds[0]).unwrap();
    let result = run_agreement_experiment(config, &data, &run.model).unwrap();
    let mut paths = write_agreement_outputs(dir, &result).unwrap();
    paths.sort();
    paths
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn criterion_9() {
    for family in [ModelFamily::Recurrent, ModelFamily::Transformer] {
        let config = small_agreement_config(family);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = agreement_run(&config, a.path());
        let second = agreement_run(&config, b.path());
        let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["agreement.csv", "agreement.json", "agreement.md", "attributions.jsonl"]);
        for ((name, x), (_, y)) in first.iter().zip(&second) {
            assert!(!x.is_empty(), "{family} {name} is empty");
            assert!(x == y, "{family} {name} differs between identical runs");
        }
    }
}

fn criterion_10() {
    for family in [ModelFamily::Recurrent, ModelFamily::Transformer] {
        let config = small_agreement_config(family);
        let data = config.dataset.load().unwrap();
        let run = train_run(&config, &data, AttentionMode::Softmax, 4).unwrap();
        let result = run_agreement_experiment(&config, &data, &run.model).unwrap();
        let matrix = &result.matrix;
        assert_eq!(matrix.methods.len(), 6);
        assert_eq!(matrix.cells.len(), 15, "{family}");
        let mut excluded: Vec<(MethodId, MethodId)> = matrix.cells.iter().filter(|c| c.excluded).map(|c| (c.a, c.b)).collect();
        excluded.sort();
        let mut expected = vec![
            (MethodId::IntegratedGradients, MethodId::GradShap),
            (MethodId::Deeplift, MethodId::DeepShap),
        ];
        expected.sort();
        assert_eq!(excluded, expected, "{family}");
        assert!(matrix.cells.iter().filter(|c| !c.excluded).all(|c| c.mean.is_some()));
    }
}

// ---- runner ------------------------------------------------------------------------

const CRITERIA: [(u32, &str, fn()); 10] = [
    (1, "autodiff gradients match central differences", criterion_1),
    (2, "integrated gradients completeness on the toy transformer", criterion_2),
    (3, "DeepLIFT summation-to-delta; Deep-SHAP with pad background equals DeepLIFT", criterion_3),
    (4, "Grad-SHAP, Deep-SHAP and LIME against exact Shapley values", criterion_4),
    (5, "Kendall tau-b against brute-force pair counting", criterion_5),
    (6, "rollout and flow golden examples", criterion_6),
    (7, "aggregates of the published agreement tables", criterion_7),
    (8, "softmax vs uniform attention ablation", criterion_8),
    (9, "byte-identical agreement runs", criterion_9),
    (10, "six methods give 15 pairs with two SHAP-variant exclusions", criterion_10),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let chosen: Vec<_> = CRITERIA.iter().filter(|(id, _, _)| selected.is_empty() || selected.contains(id)).collect();
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<String>()
            .map(String::as_str)
            .or_else(|| info.payload().downcast_ref::<&str>().copied())
            .unwrap_or("panic");
        let at = info.location().map(|l| format!(" ({}:{})", l.file(), l.line())).unwrap_or_default();
        eprintln!("  {msg}{at}");
    }));
    // criteria are independent; run them side by side and report in order
    let results: Vec<(u32, &str, bool, Duration)> = std::thread::scope(|scope| {
        let handles: Vec<_> = chosen
            .iter()
            .map(|&&(id, name, f)| {
                scope.spawn(move || {
                    let started = Instant::now();
                    let ok = catch_unwind(AssertUnwindSafe(f)).is_ok();
                    (id, name, ok, started.elapsed())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    println!();
    for (id, name, ok, took) in &results {
        println!("criterion {id:>2} {}: {name} ({:.1} s)", if *ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
        failed += !ok as usize;
    }
    println!("\nacceptance: {} passed, {failed} failed\n", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
