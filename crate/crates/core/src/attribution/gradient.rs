use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Aggregation, AttributionError, Explanation, MethodId, Scorer, Subject};
use crate::autodiff::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgConfig {
    pub steps: usize,
    pub aggregation: Aggregation,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            aggregation: Aggregation::Sum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradShapConfig {
    pub samples: usize,
    /// Standard deviation of Gaussian noise added to the explained rows.
    pub noise: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl Default for GradShapConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            noise: 0.09,
            seed: 0,
            aggregation: Aggregation::Sum,
        }
    }
}

fn resolve_target<S: Scorer>(subject: &Subject<S>, target: Option<usize>) -> Result<usize, AttributionError> {
    match target {
        Some(t) => Ok(t),
        None => subject.predicted(),
    }
}

/// Per-position scores from an `[n, d]` attribution map.
fn per_position(attr: &Tensor, agg: Aggregation) -> Vec<f64> {
    (0..attr.shape()[0]).map(|r| agg.apply(attr.row(r))).collect()
}

fn finish<S: Scorer>(
    subject: &Subject<S>,
    method: MethodId,
    target: usize,
    attr: &Tensor,
    agg: Aggregation,
    delta: f64,
) -> Result<Explanation, AttributionError> {
    let mut e = subject.explanation(method, target, &per_position(attr, agg))?;
    e.residual = Some((attr.sum() - delta).abs());
    Ok(e)
}

/// Sums tensors in order, so parallel producers still give one fixed result.
fn ordered_sum(parts: Vec<Tensor>) -> Option<Tensor> {
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |acc, t| acc.zip_map(&t, |a, b| a + b)))
}

/// Path integral of gradients from `baseline` to the input, midpoint rule.
pub fn integrated_gradients<S: Scorer>(
    subject: &Subject<S>,
    target: Option<usize>,
    baseline: &Tensor,
    config: &IgConfig,
) -> Result<Explanation, AttributionError> {
    if config.steps < 2 {
        return Err(AttributionError::Config(format!("steps must be ≥ 2, got {}", config.steps)));
    }
    subject.check_baseline(baseline)?;
    let target = resolve_target(subject, target)?;
    let x = &subject.embeddings;
    let diff = x.zip_map(baseline, |a, b| a - b);
    if diff.data().iter().all(|&v| v == 0.0) {
        let mut e = subject.explanation(MethodId::IntegratedGradients, target, &vec![0.0; subject.num_positions()])?;
        e.residual = Some(0.0);
        return Ok(e);
    }
    let m = config.steps;
    let grads: Result<Vec<Tensor>, AttributionError> = (0..m)
        .into_par_iter()
        .map(|k| {
            let alpha = (k as f64 + 0.5) / m as f64;
            let point = baseline.zip_map(&diff, |b, d| b + alpha * d);
            Ok(subject.gradient_at(&point, target)?.1)
        })
        .collect();
    let total = ordered_sum(grads?).expect("steps ≥ 2");
    let attr = diff.zip_map(&total, |d, g| d * g / m as f64);
    let delta = subject.output_at(x, target)? - subject.output_at(baseline, target)?;
    finish(subject, MethodId::IntegratedGradients, target, &attr, config.aggregation, delta)
}

/// DeepLIFT multipliers times `x − x̄`, and `f(x) − f(x̄)`.
fn deeplift_map<S: Scorer>(subject: &Subject<S>, target: usize, baseline: &Tensor) -> Result<(Tensor, f64), AttributionError> {
    subject.check_baseline(baseline)?;
    let run = |x: &Tensor| -> Result<(Tape, crate::autodiff::Var, crate::autodiff::Var), AttributionError> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let logits = subject.scorer.logits(&mut tape, v)?;
        let out = tape.pick(logits, target)?;
        Ok((tape, v, out))
    };
    let (reference, _, ref_out) = run(baseline)?;
    let (actual, input, out) = run(&subject.embeddings)?;
    let mult = actual.deeplift(&reference, out)?.wrt(input);
    let attr = subject
        .embeddings
        .zip_map(baseline, |a, b| a - b)
        .zip_map(&mult, |d, m| d * m);
    let delta = actual.value(out).data()[0] - reference.value(ref_out).data()[0];
    Ok((attr, delta))
}

pub fn deeplift<S: Scorer>(
    subject: &Subject<S>,
    target: Option<usize>,
    baseline: &Tensor,
    aggregation: Aggregation,
) -> Result<Explanation, AttributionError> {
    let target = resolve_target(subject, target)?;
    let (attr, delta) = deeplift_map(subject, target, baseline)?;
    finish(subject, MethodId::Deeplift, target, &attr, aggregation, delta)
}

/// Average of DeepLIFT over the background references.
pub fn deep_shap<S: Scorer>(
    subject: &Subject<S>,
    target: Option<usize>,
    backgrounds: &[Tensor],
    aggregation: Aggregation,
) -> Result<Explanation, AttributionError> {
    if backgrounds.is_empty() {
        return Err(AttributionError::NoBaselines);
    }
    let target = resolve_target(subject, target)?;
    let parts: Result<Vec<(Tensor, f64)>, AttributionError> =
        backgrounds.par_iter().map(|b| deeplift_map(subject, target, b)).collect();
    let parts = parts?;
    let deltas: f64 = parts.iter().map(|(_, d)| d).sum();
    let total = ordered_sum(parts.into_iter().map(|(a, _)| a).collect()).expect("non-empty");
    let k = backgrounds.len() as f64;
    let attr = if backgrounds.len() == 1 { total } else { total.map(|v| v / k) };
    finish(subject, MethodId::DeepShap, target, &attr, aggregation, deltas / k)
}

/// Expected gradients: average over random (reference, interpolation point)
/// pairs of `(x − x̄) ⊙ ∇f`, with Gaussian noise on the evaluation point.
pub fn grad_shap<S: Scorer>(
    subject: &Subject<S>,
    target: Option<usize>,
    backgrounds: &[Tensor],
    config: &GradShapConfig,
) -> Result<Explanation, AttributionError> {
    if backgrounds.is_empty() {
        return Err(AttributionError::NoBaselines);
    }
    if config.samples == 0 {
        return Err(AttributionError::Config("samples must be ≥ 1".into()));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(AttributionError::Config(format!("noise must be ≥ 0, got {}", config.noise)));
    }
    for b in backgrounds {
        subject.check_baseline(b)?;
    }
    let target = resolve_target(subject, target)?;
    let x = &subject.embeddings;
    let d = subject.dim();
    let normal = Normal::new(0.0, config.noise).expect("checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // draw everything up front so the parallel part is order-independent
    let draws: Vec<(usize, f64, Vec<f64>)> = (0..config.samples)
        .map(|_| {
            let k = rng.random_range(0..backgrounds.len());
            let alpha: f64 = rng.random();
            let noise = if config.noise > 0.0 {
                (0..subject.features.len() * d).map(|_| normal.sample(&mut rng)).collect()
            } else {
                vec![]
            };
            (k, alpha, noise)
        })
        .collect();
    let parts: Result<Vec<Tensor>, AttributionError> = draws
        .par_iter()
        .map(|(k, alpha, noise)| {
            let b = &backgrounds[*k];
            let mut noisy = x.clone();
            if !noise.is_empty() {
                for (f, &p) in subject.features.iter().enumerate() {
                    for j in 0..d {
                        noisy.data_mut()[p * d + j] += noise[f * d + j];
                    }
                }
            }
            let point = b.zip_map(&noisy, |b, x| b + alpha * (x - b));
            let grad = subject.gradient_at(&point, target)?.1;
            Ok(x.zip_map(b, |a, b| a - b).zip_map(&grad, |d, g| d * g))
        })
        .collect();
    let n = config.samples as f64;
    let attr = ordered_sum(parts?).expect("samples ≥ 1").map(|v| v / n);
    let fx = subject.output_at(x, target)?;
    let mut fb = 0.0;
    for b in backgrounds {
        fb += subject.output_at(b, target)?;
    }
    finish(subject, MethodId::GradShap, target, &attr, config.aggregation, fx - fb / backgrounds.len() as f64)
}
