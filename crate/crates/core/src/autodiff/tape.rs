use std::borrow::Cow;

use super::tensor::{matmul_nt, matmul_tn};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax {
        input: Var,
        axis: usize,
        mask: Option<Vec<bool>>,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::LayerNorm { .. } => "layernorm",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run computation record. Every node's inputs precede it, so the
/// reverse pass is a single sweep from the output back to index 0.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node results of a reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when `v` has no path to the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

// Differences below this (scaled) size fall back to the midpoint derivative
// instead of a secant slope.
const SECANT_EPS: f64 = 1e-10;

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= SECANT_EPS * (1.0 + a.abs().max(b.abs()))
}

fn secant(x: f64, xr: f64, y: f64, yr: f64, deriv: impl Fn(f64) -> f64) -> f64 {
    if near(x, xr) {
        deriv(0.5 * (x + xr))
    } else {
        (y - yr) / (x - xr)
    }
}

/// (outer, len, inner) strides for iterating along `axis`.
fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Sums `g` (shaped like the broadcast output) down to `len` trailing entries.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("shape and data length agree")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaves flagged trainable, in recording order.
    pub fn parameters(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true }))
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { trainable: false }, value)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { trainable: true }, value)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(vb.shape(), va.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let n = vb.len().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % n]))
            .collect();
        Ok((va.shape().to_vec(), data))
    }

    /// Elementwise sum; `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, data) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), tensor(&shape, data)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, data) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), tensor(&shape, data)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, data) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), tensor(&shape, data)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(TensorError::NonPositiveLog(bad));
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.push(Op::Log(a), value))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    fn check_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<(), TensorError> {
        if axis >= self.value(a).rank() {
            return Err(TensorError::BadAxis {
                op: name,
                axis,
                shape: self.shape(a).to_vec(),
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.masked_softmax(a, axis, None)
    }

    /// Softmax along `axis`; entries whose `mask` flag is false are excluded
    /// (as if their pre-activation were −∞) and come out exactly zero.
    pub fn masked_softmax(
        &mut self,
        a: Var,
        axis: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<Var, TensorError> {
        self.check_axis("softmax", a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = axis_geometry(x.shape(), axis);
        if let Some(m) = &mask {
            if m.len() != len {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax mask",
                    left: x.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
            if !m.iter().any(|&k| k) {
                return Err(TensorError::EmptyMask);
            }
        }
        let keep = |k: usize| mask.as_ref().is_none_or(|m| m[k]);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len)
                    .filter(|&k| keep(k))
                    .map(|k| x.data()[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in (0..len).filter(|&k| keep(k)) {
                    let e = (x.data()[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = tensor(x.shape(), out);
        Ok(self.push(Op::Softmax { input: a, axis, mask }, value))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("log_softmax", a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = axis_geometry(x.shape(), axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len)
                    .map(|k| x.data()[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (x.data()[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = x.data()[at(k)] - lse;
                }
            }
        }
        let value = tensor(x.shape(), out);
        Ok(self.push(Op::LogSoftmax { input: a, axis }, value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(Op::Mean(a), value)
    }

    fn reduce_axis(&self, a: Var, axis: usize, scale_by_len: bool) -> Tensor {
        let x = self.value(a);
        let (outer, len, inner) = axis_geometry(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[o * len * inner + k * inner + i];
                }
            }
        }
        if scale_by_len {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        tensor(&shape, out)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("sum_axis", a, axis)?;
        let value = self.reduce_axis(a, axis, false);
        Ok(self.push(Op::SumAxis { input: a, axis }, value))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("mean_axis", a, axis)?;
        let value = self.reduce_axis(a, axis, true);
        Ok(self.push(Op::MeanAxis { input: a, axis }, value))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or(TensorError::EmptyConcat)?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_geometry(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let x = self.value(v);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = tensor(&shape, data);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
        ))
    }

    /// Rows of a `[vocab, d]` table selected by id; result `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "gather",
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, len: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = tensor(&[ids.len(), d], data);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().ok_or(TensorError::RankMismatch {
            op: "layernorm",
            expected: 1,
            shape: vec![],
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let stats = LnRow::new(row, eps);
            out.extend((0..d).map(|j| g.data()[j] * stats.centered[j] * stats.inv_std + b.data()[j]));
        }
        let value = tensor(xv.shape(), out);
        Ok(self.push(Op::LayerNorm { input: x, gamma, beta, eps }, value))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        self.check_axis("slice", a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = axis_geometry(x.shape(), axis);
        if start >= end || end > len {
            return Err(TensorError::IndexOutOfRange { index: end, len });
        }
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[o * len * inner + start * inner..o * len * inner + end * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = end - start;
        let value = tensor(&shape, data);
        Ok(self.push(Op::Slice { input: a, axis, start, end }, value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Single element at flat `index`, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, TensorError> {
        let len = self.value(a).len();
        if index >= len {
            return Err(TensorError::IndexOutOfRange { index, len });
        }
        let flat = self.reshape(a, &[len])?;
        let one = self.slice(flat, 0, index, index + 1)?;
        self.reshape(one, &[])
    }

    /// Reverse-mode gradient of a scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        self.propagate(output, None)
    }

    /// Gradient of `output` with respect to `input`; zeros when `input` does
    /// not feed `output`.
    pub fn grad_wrt_input(&self, output: Var, input: Var) -> Result<Tensor, TensorError> {
        Ok(self.backward(output)?.wrt(input))
    }

    /// DeepLIFT multipliers of `output` against a reference pass.
    ///
    /// `reference` must record the same operations on the same shapes, with
    /// only leaf values differing. Elementwise nonlinearities use the Rescale
    /// rule (secant slope between actual and reference value); products of two
    /// varying operands split the difference symmetrically, so that
    /// `Σ multiplier · Δleaf = Δoutput` holds for every supported graph.
    pub fn deeplift(&self, reference: &Tape, output: Var) -> Result<Gradients, TensorError> {
        if self.nodes.len() != reference.nodes.len() {
            return Err(TensorError::ReferenceMismatch {
                index: self.nodes.len().min(reference.nodes.len()),
                detail: format!(
                    "tape lengths differ: {} vs {}",
                    self.nodes.len(),
                    reference.nodes.len()
                ),
            });
        }
        for (i, (a, b)) in self.nodes.iter().zip(&reference.nodes).enumerate() {
            if a.op != b.op || a.value.shape() != b.value.shape() {
                return Err(TensorError::ReferenceMismatch {
                    index: i,
                    detail: format!(
                        "{} {:?} vs {} {:?}",
                        a.op.name(),
                        a.value.shape(),
                        b.op.name(),
                        b.value.shape()
                    ),
                });
            }
        }
        self.propagate(output, Some(reference))
    }

    fn propagate(&self, output: Var, reference: Option<&Tape>) -> Result<Gradients, TensorError> {
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return Err(TensorError::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out_value.shape(), 1.0));
        let mut sweep = Sweep {
            tape: self,
            reference,
            grads,
        };
        for idx in (0..=output.0).rev() {
            if let Some(g) = sweep.grads[idx].take() {
                sweep.step(idx, &g)?;
                sweep.grads[idx] = Some(g);
            }
        }
        Ok(Gradients {
            grads: sweep.grads,
            shapes: self.nodes[..=output.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct LnRow {
    centered: Vec<f64>,
    shifted_var: f64,
    inv_std: f64,
}

impl LnRow {
    fn new(row: &[f64], eps: f64) -> Self {
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let centered: Vec<f64> = row.iter().map(|x| x - mean).collect();
        let shifted_var = centered.iter().map(|c| c * c).sum::<f64>() / d + eps;
        Self {
            centered,
            shifted_var,
            inv_std: 1.0 / shifted_var.sqrt(),
        }
    }
}

struct Sweep<'t> {
    tape: &'t Tape,
    reference: Option<&'t Tape>,
    grads: Vec<Option<Tensor>>,
}

impl Sweep<'_> {
    fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    fn ref_value(&self, v: Var) -> &Tensor {
        self.reference.unwrap_or(self.tape).value(v)
    }

    /// Midpoint of actual and reference values (the actual value itself for
    /// a plain gradient pass).
    fn avg(&self, v: Var) -> Cow<'_, Tensor> {
        match self.reference {
            None => Cow::Borrowed(self.value(v)),
            Some(r) => Cow::Owned(self.value(v).zip_map(r.value(v), |a, b| 0.5 * (a + b))),
        }
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => {
                *slot = Some(tensor(self.tape.value(v).shape(), g));
            }
        }
    }

    /// Multiplier of an elementwise op: derivative for a gradient pass,
    /// secant slope against the reference for DeepLIFT.
    fn unary(
        &mut self,
        input: Var,
        out_idx: usize,
        g: &Tensor,
        deriv_from_out: impl Fn(f64, f64) -> f64,
        deriv_at: impl Fn(f64) -> f64,
    ) {
        let x = self.value(input).data();
        let y = self.tape.nodes[out_idx].value.data();
        let gx: Vec<f64> = match self.reference {
            None => (0..x.len())
                .map(|i| g.data()[i] * deriv_from_out(x[i], y[i]))
                .collect(),
            Some(r) => {
                let xr = r.value(input).data();
                let yr = r.nodes[out_idx].value.data();
                (0..x.len())
                    .map(|i| g.data()[i] * secant(x[i], xr[i], y[i], yr[i], &deriv_at))
                    .collect()
            }
        };
        self.accumulate(input, gx);
    }

    fn step(&mut self, idx: usize, g: &Tensor) -> Result<(), TensorError> {
        let op = &self.tape.nodes[idx].op;
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (a, b) = (*a, *b);
                self.accumulate(a, g.data().to_vec());
                let mut gb = reduce_to(g.data(), self.value(b).len().max(1));
                gb.iter_mut().for_each(|x| *x *= sign);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let avg_a = self.avg(a).into_owned();
                let avg_b = self.avg(b).into_owned();
                let nb = avg_b.len().max(1);
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * avg_b.data()[i % nb])
                    .collect();
                let prod: Vec<f64> = g.data().iter().zip(avg_a.data()).map(|(x, y)| x * y).collect();
                self.accumulate(a, ga);
                self.accumulate(b, reduce_to(&prod, nb));
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, g.data().iter().map(|x| c * x).collect());
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                let avg_a = self.avg(a).into_owned();
                let avg_b = self.avg(b).into_owned();
                self.accumulate(a, matmul_nt(g.data(), avg_b.data(), m, n, k));
                self.accumulate(b, matmul_tn(avg_a.data(), g.data(), m, k, n));
            }
            Op::Transpose(a) => {
                let a = *a;
                self.accumulate(a, g.transpose()?.into_data());
            }
            Op::Tanh(a) => {
                let a = *a;
                self.unary(a, idx, g, |_, y| 1.0 - y * y, |t| 1.0 - t.tanh().powi(2));
            }
            Op::Sigmoid(a) => {
                let a = *a;
                self.unary(
                    a,
                    idx,
                    g,
                    |_, y| y * (1.0 - y),
                    |t| {
                        let s = sigmoid(t);
                        s * (1.0 - s)
                    },
                );
            }
            Op::Exp(a) => {
                let a = *a;
                self.unary(a, idx, g, |_, y| y, f64::exp);
            }
            Op::Log(a) => {
                let a = *a;
                self.unary(a, idx, g, |x, _| 1.0 / x, |t| 1.0 / t);
            }
            Op::Abs(a) => {
                let a = *a;
                let sign = |t: f64| {
                    if t > 0.0 {
                        1.0
                    } else if t < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.unary(a, idx, g, |x, _| sign(x), sign);
            }
            Op::Softmax { input, axis, mask } => {
                let gx = self.softmax_backward(*input, idx, *axis, mask.as_deref(), g);
                self.accumulate(*input, gx);
            }
            Op::LogSoftmax { input, axis } => {
                if self.reference.is_some() {
                    return Err(TensorError::Unsupported("log_softmax"));
                }
                let (input, axis) = (*input, *axis);
                let y = &self.tape.nodes[idx].value;
                let (outer, len, inner) = axis_geometry(y.shape(), axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let gsum: f64 = (0..len).map(|k| g.data()[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = g.data()[at(k)] - y.data()[at(k)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(input, gx);
            }
            Op::Sum(a) => {
                let a = *a;
                let n = self.value(a).len();
                self.accumulate(a, vec![g.data()[0]; n]);
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.value(a).len();
                self.accumulate(a, vec![g.data()[0] / n as f64; n]);
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let scale_by_len = matches!(op, Op::MeanAxis { .. });
                let (input, axis) = (*input, *axis);
                let shape = self.value(input).shape().to_vec();
                let (outer, len, inner) = axis_geometry(&shape, axis);
                let factor = if scale_by_len { 1.0 / len as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[o * len * inner + k * inner + i] = g.data()[o * inner + i] * factor;
                        }
                    }
                }
                self.accumulate(input, gx);
            }
            Op::Concat { inputs, axis } => {
                let (inputs, axis) = (inputs.clone(), *axis);
                let out_shape = self.tape.nodes[idx].value.shape().to_vec();
                let (outer, total, inner) = axis_geometry(&out_shape, axis);
                let mut offset = 0;
                for v in inputs {
                    let width = self.value(v).shape()[axis];
                    let mut gx = Vec::with_capacity(outer * width * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gx.extend_from_slice(&g.data()[base..base + width * inner]);
                    }
                    offset += width;
                    self.accumulate(v, gx);
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let t = self.value(table);
                let d = t.shape()[1];
                let mut gt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g.data()[r * d + j];
                    }
                }
                self.accumulate(table, gt);
            }
            Op::LayerNorm { input, gamma, beta, eps } => {
                self.layernorm_backward(*input, *gamma, *beta, *eps, g);
            }
            Op::Slice { input, axis, start, end } => {
                let (input, axis, start, end) = (*input, *axis, *start, *end);
                let shape = self.value(input).shape().to_vec();
                let (outer, len, inner) = axis_geometry(&shape, axis);
                let width = end - start;
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    let src = o * width * inner;
                    gx[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
                }
                self.accumulate(input, gx);
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accumulate(a, g.data().to_vec());
            }
        }
        Ok(())
    }

    fn softmax_backward(
        &self,
        input: Var,
        out_idx: usize,
        axis: usize,
        mask: Option<&[bool]>,
        g: &Tensor,
    ) -> Vec<f64> {
        let x = self.value(input);
        let (outer, len, inner) = axis_geometry(x.shape(), axis);
        let keep = |k: usize| mask.is_none_or(|m| m[k]);
        let mut gx = vec![0.0; x.len()];
        match self.reference {
            None => {
                let y = self.tape.nodes[out_idx].value.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g.data()[at(k)] * y[at(k)]).sum();
                        for k in (0..len).filter(|&k| keep(k)) {
                            gx[at(k)] = y[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
            }
            Some(r) => {
                // softmax = exp(x − c) · (1 / Σ exp(x − c)) with a shift c shared by
                // both passes; each factor gets its own Rescale/product multiplier.
                let xr = r.value(input);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let kept: Vec<usize> = (0..len).filter(|&k| keep(k)).collect();
                        let c = kept
                            .iter()
                            .map(|&k| x.data()[at(k)].max(xr.data()[at(k)]))
                            .fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = kept.iter().map(|&k| (x.data()[at(k)] - c).exp()).collect();
                        let er: Vec<f64> = kept.iter().map(|&k| (xr.data()[at(k)] - c).exp()).collect();
                        let (s, sr) = (e.iter().sum::<f64>(), er.iter().sum::<f64>());
                        let avg_recip = 0.5 * (1.0 / s + 1.0 / sr);
                        let g_recip: f64 = kept
                            .iter()
                            .enumerate()
                            .map(|(j, &k)| g.data()[at(k)] * 0.5 * (e[j] + er[j]))
                            .sum();
                        let m_recip = secant(s, sr, 1.0 / s, 1.0 / sr, |t| -1.0 / (t * t));
                        let g_sum = g_recip * m_recip;
                        for (j, &k) in kept.iter().enumerate() {
                            let g_e = g.data()[at(k)] * avg_recip + g_sum;
                            let m_exp = secant(x.data()[at(k)], xr.data()[at(k)], e[j], er[j], |t| {
                                (t - c).exp()
                            });
                            gx[at(k)] = g_e * m_exp;
                        }
                    }
                }
            }
        }
        gx
    }

    fn layernorm_backward(&mut self, input: Var, gamma: Var, beta: Var, eps: f64, g: &Tensor) {
        let x = self.value(input);
        let xr = self.ref_value(input);
        let d = *x.shape().last().expect("layernorm input has rank >= 1");
        let avg_gamma = self.avg(gamma).into_owned();
        let mut gx = Vec::with_capacity(x.len());
        let mut g_gamma = vec![0.0; d];
        let mut g_beta = vec![0.0; d];
        for (r, (row, row_ref)) in x.data().chunks(d).zip(xr.data().chunks(d)).enumerate() {
            let a = LnRow::new(row, eps);
            let b = LnRow::new(row_ref, eps);
            let gr = &g.data()[r * d..(r + 1) * d];
            let avg_inv = 0.5 * (a.inv_std + b.inv_std);
            let mut g_centered = vec![0.0; d];
            let mut g_inv = 0.0;
            for j in 0..d {
                let normed = 0.5 * (a.centered[j] * a.inv_std + b.centered[j] * b.inv_std);
                g_gamma[j] += gr[j] * normed;
                g_beta[j] += gr[j];
                let g_normed = gr[j] * avg_gamma.data()[j];
                g_centered[j] += g_normed * avg_inv;
                g_inv += g_normed * 0.5 * (a.centered[j] + b.centered[j]);
            }
            let m_inv = secant(a.shifted_var, b.shifted_var, a.inv_std, b.inv_std, |t| {
                -0.5 * t.powf(-1.5)
            });
            let g_var = g_inv * m_inv / d as f64;
            for j in 0..d {
                g_centered[j] += g_var * (a.centered[j] + b.centered[j]);
            }
            let mean_g = g_centered.iter().sum::<f64>() / d as f64;
            gx.extend(g_centered.iter().map(|v| v - mean_g));
        }
        self.accumulate(input, gx);
        self.accumulate(gamma, g_gamma);
        self.accumulate(beta, g_beta);
    }
}
