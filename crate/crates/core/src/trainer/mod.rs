//! Mini-batch training with Adam-family optimizers and early stopping on
//! validation accuracy.

mod optim;


use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::data::{Instance, Split};
use crate::models::{Model, ModelError, Network, TrainingMetadata};

pub use optim::{Adam, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Defaults by model family: AMSGrad for the recurrent model, AdamW for
    /// the transformer.
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 40,
            patience: 5,
            optimizer: None,
            learning_rate: None,
            weight_decay: None,
            batch_size: 32,
            seeds: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.learning_rate.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn optimizer_for(&self, model: &Model) -> OptimizerKind {
        self.optimizer.unwrap_or(match model.network {
            Network::Recurrent(_) => OptimizerKind::Amsgrad,
            Network::Transformer(_) => OptimizerKind::Adamw,
        })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has no {0:?} instances")]
    MissingSplit(Split),
    #[error("instance {id} has label {label} but the model has {classes} classes")]
    LabelOutOfRange { id: String, label: usize, classes: usize },
    #[error("training diverged in epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("instance {id}: {source}")]
    Model { id: String, source: ModelError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Tracks the best validation accuracy; only strict improvements count, so
/// the earliest of tied epochs is kept.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    max_epochs: usize,
    epochs: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self {
            patience,
            max_epochs,
            epochs: 0,
            best: None,
        }
    }

    /// Records one epoch; returns whether it improved on the best so far and
    /// whether to keep going.
    pub fn observe(&mut self, accuracy: f64) -> (bool, Decision) {
        self.epochs += 1;
        let improved = self.best.is_none_or(|(_, b)| accuracy > b);
        if improved {
            self.best = Some((self.epochs, accuracy));
        }
        let stale = self.epochs - self.best.map_or(0, |(e, _)| e);
        let decision = if stale >= self.patience || self.epochs >= self.max_epochs {
            Decision::Stop
        } else {
            Decision::Continue
        };
        (improved, decision)
    }

    /// 1-based epoch and accuracy of the best epoch.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the highest validation accuracy.
    pub model: Model,
    pub metadata: TrainingMetadata,
    pub history: Vec<EpochRecord>,
}

/// Cross-entropy of one instance and its gradients, in `params_mut` order.
fn example_gradients(model: &Model, instance: &Instance) -> Result<(f64, Vec<Tensor>), TrainError> {
    let wrap = |source| TrainError::Model {
        id: instance.id.clone(),
        source,
    };
    let input = model.encode(instance).map_err(wrap)?;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &input, None, true).map_err(wrap)?;
    let logp = tape.log_softmax(pass.logits, 0)?;
    let picked = tape.pick(logp, instance.label)?;
    let loss = tape.scale(picked, -1.0);
    let grads = tape.backward(loss)?;
    let per_param = pass.params.iter().map(|v| grads.wrt(v.expect("bound during training"))).collect();
    Ok((tape.value(loss).data()[0], per_param))
}

/// Mean loss over `batch` and the summed-then-averaged gradients. Examples run
/// in parallel; the reduction is sequential so results are bit-reproducible.
fn batch_gradients(model: &Model, batch: &[&Instance]) -> Result<(f64, Vec<Tensor>), TrainError> {
    let results: Vec<_> = batch.par_iter().map(|inst| example_gradients(model, inst)).collect();
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        acc = Some(match acc {
            None => grads,
            Some(sum) => sum.iter().zip(&grads).map(|(a, b)| a.zip_map(b, |x, y| x + y)).collect(),
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let grads = acc.unwrap_or_default().iter().map(|g| g.map(|x| x * scale)).collect();
    Ok((total * scale, grads))
}

pub fn accuracy(model: &Model, instances: &[&Instance]) -> Result<f64, TrainError> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let hits: Result<Vec<bool>, TrainError> = instances
        .par_iter()
        .map(|inst| {
            let wrap = |source| TrainError::Model {
                id: inst.id.clone(),
                source,
            };
            let input = model.encode(inst).map_err(wrap)?;
            Ok(model.predict(&input).map_err(wrap)? == inst.label)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Trains `model` on the train split, selecting on validation accuracy.
/// `seed` drives the batch order.
pub fn train(mut model: Model, data: &[Instance], config: &TrainConfig, seed: u64) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let pick = |s: Split| data.iter().filter(move |i| i.split == s).collect::<Vec<_>>();
    let mut train_set = pick(Split::Train);
    let val_set = pick(Split::Validation);
    if train_set.is_empty() {
        return Err(TrainError::MissingSplit(Split::Train));
    }
    if val_set.is_empty() {
        return Err(TrainError::MissingSplit(Split::Validation));
    }
    let classes = model.num_classes();
    if let Some(bad) = train_set.iter().chain(&val_set).find(|i| i.label >= classes) {
        return Err(TrainError::LabelOutOfRange {
            id: bad.id.clone(),
            label: bad.label,
            classes,
        });
    }

    let kind = config.optimizer_for(&model);
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut opt = Adam::new(
        kind,
        config.learning_rate.unwrap_or(kind.default_learning_rate()),
        config.weight_decay.unwrap_or(kind.default_weight_decay()),
        &sizes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stopper = EarlyStopping::new(config.patience, config.max_epochs);
    let mut best = model.clone();
    let mut history = Vec::new();

    loop {
        let epoch = stopper.epochs() + 1;
        let started = Instant::now();
        train_set.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train_set.chunks(config.batch_size) {
            let (loss, grads) = batch_gradients(&model, batch)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut model.params_mut(), &grads);
            model.enforce_invariants();
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_accuracy = accuracy(&model, &val_set)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: loss {train_loss:.4}, val acc {val_accuracy:.4}");
        let (improved, decision) = stopper.observe(val_accuracy);
        if improved {
            best = model.clone();
        }
        if decision == Decision::Stop {
            break;
        }
    }

    let (best_epoch, validation_accuracy) = stopper.best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best,
        metadata: TrainingMetadata {
            seed,
            epochs_run: stopper.epochs(),
            best_epoch,
            validation_accuracy,
        },
        history,
    })
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Summary of one value per run, e.g. final validation accuracy or minutes.
pub fn multi_seed_summary(values: &[f64]) -> Option<SeedSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(SeedSummary {
        runs: values.len(),
        mean,
        std: var.sqrt(),
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in history {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
