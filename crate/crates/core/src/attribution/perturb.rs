use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttributionError, Explanation, MethodId, Scorer, Subject};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimeConfig {
    pub samples: usize,
    /// Kernel width; `None` means `0.25·√n` for `n` features.
    pub kernel_width: Option<f64>,
    /// Ridge penalty on the coefficients (the intercept is not penalized).
    pub ridge: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            kernel_width: None,
            ridge: 1.0,
            seed: 0,
        }
    }
}

/// Cosine distance between a mask with `kept` ones and the all-ones mask.
fn cosine_distance(kept: usize, n: usize) -> f64 {
    if kept == 0 {
        1.0
    } else {
        1.0 - (kept as f64 / n as f64).sqrt()
    }
}

/// Solves the weighted ridge problem with an unpenalized intercept and
/// returns the coefficients.
pub(crate) fn weighted_ridge(z: &DMatrix<f64>, y: &[f64], w: &[f64], lambda: f64) -> Option<DVector<f64>> {
    let (m, n) = z.shape();
    let wsum: f64 = w.iter().sum();
    let zbar = DVector::from_fn(n, |j, _| (0..m).map(|i| w[i] * z[(i, j)]).sum::<f64>() / wsum);
    let ybar = (0..m).map(|i| w[i] * y[i]).sum::<f64>() / wsum;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let mut row = DVector::<f64>::zeros(n);
    for i in 0..m {
        for j in 0..n {
            row[j] = z[(i, j)] - zbar[j];
        }
        a.ger(w[i], &row, &row, 1.0);
        b.axpy(w[i] * (y[i] - ybar), &row, 1.0);
    }
    for j in 0..n {
        a[(j, j)] += lambda;
    }
    Some(a.cholesky()?.solve(&b))
}

/// Local linear surrogate over random token-removal masks.
pub fn lime<S: Scorer>(subject: &Subject<S>, target: Option<usize>, config: &LimeConfig) -> Result<Explanation, AttributionError> {
    if !(config.ridge > 0.0 && config.ridge.is_finite()) {
        return Err(AttributionError::Config(format!("ridge penalty must be > 0, got {}", config.ridge)));
    }
    if config.samples == 0 {
        return Err(AttributionError::Config("samples must be ≥ 1".into()));
    }
    if config.kernel_width.is_some_and(|w| w.is_nan() || w <= 0.0) {
        return Err(AttributionError::Config("kernel width must be > 0".into()));
    }
    let target = match target {
        Some(t) => t,
        None => subject.predicted()?,
    };
    let n = subject.features.len();
    let mut scores = vec![0.0; subject.num_positions()];
    if n == 0 {
        return subject.explanation(MethodId::Lime, target, &scores);
    }
    let width = config.kernel_width.unwrap_or(0.25 * (n as f64).sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // first sample is the unperturbed input
    let masks: Vec<Vec<bool>> = (0..config.samples)
        .map(|s| {
            let mut keep = vec![true; n];
            if s > 0 {
                let removed = rng.random_range(1..=n);
                for i in index::sample(&mut rng, n, removed) {
                    keep[i] = false;
                }
            }
            keep
        })
        .collect();
    let outputs: Result<Vec<f64>, AttributionError> = masks
        .par_iter()
        .map(|keep| {
            let drop = keep.iter().zip(&subject.features).filter(|(k, _)| !**k).map(|(_, &p)| p);
            subject.output_at(&subject.masked(drop), target)
        })
        .collect();
    let outputs = outputs?;
    let weights: Vec<f64> = masks
        .iter()
        .map(|k| {
            let d = cosine_distance(k.iter().filter(|&&b| b).count(), n);
            (-(d * d) / (width * width)).exp()
        })
        .collect();
    let z = DMatrix::from_fn(masks.len(), n, |i, j| if masks[i][j] { 1.0 } else { 0.0 });
    let coef = weighted_ridge(&z, &outputs, &weights, config.ridge)
        .ok_or_else(|| AttributionError::Config("ridge system is not positive definite".into()))?;
    for (j, &p) in subject.features.iter().enumerate() {
        scores[p] = coef[j];
    }
    subject.explanation(MethodId::Lime, target, &scores)
}

/// Drop in the target logit when each token alone is replaced by `[PAD]`.
pub fn leave_one_out<S: Scorer>(subject: &Subject<S>, target: Option<usize>) -> Result<Explanation, AttributionError> {
    let target = match target {
        Some(t) => t,
        None => subject.predicted()?,
    };
    let full = subject.output_at(&subject.embeddings, target)?;
    let drops: Result<Vec<f64>, AttributionError> = subject
        .features
        .par_iter()
        .map(|&p| Ok(full - subject.output_at(&subject.masked([p]), target)?))
        .collect();
    let mut scores = vec![0.0; subject.num_positions()];
    for (&p, d) in subject.features.iter().zip(drops?) {
        scores[p] = d;
    }
    subject.explanation(MethodId::LeaveOneOut, target, &scores)
}
