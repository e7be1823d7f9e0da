use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_methods, BaselineKind, Dataset, ExperimentConfig, ExplainConfig, ModelFamily, ModelSpec, PipelineError};
use crate::agreement::{agreement_matrix, render_report, summarize, AgreementMatrix, Grouping, MatrixLabel, Report, ReportFormat, Scope, Summary};
use crate::attention::explain_with_attention;
use crate::attribution::{
    deep_shap, deeplift, grad_shap, integrated_gradients, leave_one_out, lime, write_dump, BaselineSpec, Explanation, GradShapConfig,
    LimeConfig, MethodId, Subject,
};
use crate::data::{Instance, Split};
use crate::models::{save_checkpoint, AttentionMode, Model, Network, RecurrentConfig, TrainingMetadata, TransformerConfig};
use crate::trainer::{accuracy, multi_seed_summary, train, write_history, EpochRecord};

pub fn build_model(spec: &ModelSpec, data: &Dataset, attention: AttentionMode, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = spec
        .num_classes
        .unwrap_or_else(|| data.instances.iter().map(|i| i.label + 1).max().unwrap_or(2).max(2));
    let pair = data.task_type == crate::data::TaskType::Pair;
    let vocab = data.vocab.clone();
    match spec.family {
        ModelFamily::Recurrent => {
            let s = spec.recurrent;
            let config = RecurrentConfig {
                vocab_size: vocab.len(),
                embed_dim: s.embed_dim,
                hidden_dim: s.hidden_dim,
                attention_dim: s.attention_dim,
                num_classes,
                pair,
                attention,
            };
            Model::recurrent(vocab, config, &mut rng)
        }
        ModelFamily::Transformer => {
            let s = spec.transformer;
            let config = TransformerConfig {
                vocab_size: vocab.len(),
                d_model: s.d_model,
                heads: s.heads,
                layers: s.layers,
                ff_dim: s.ff_dim,
                max_len: s.max_len,
                num_classes,
                pair,
                attention,
            };
            Model::transformer(vocab, config, &mut rng)
        }
    }
}

/// A trained model with everything needed for its metadata record.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Model,
    pub dataset: String,
    pub attention: AttentionMode,
    pub training: TrainingMetadata,
    pub history: Vec<EpochRecord>,
    pub split_sizes: BTreeMap<Split, usize>,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
}

/// Trains one seed and scores it on the test split.
pub fn train_run(config: &ExperimentConfig, data: &Dataset, attention: AttentionMode, seed: u64) -> Result<TrainedRun, PipelineError> {
    let started = Instant::now();
    let model = build_model(&config.model, data, attention, seed);
    let outcome = train(model, &data.instances, &config.training, seed)?;
    let test_accuracy = accuracy(&outcome.model, &data.split(Split::Test))?;
    log::info!(
        "{} {} {attention} seed {seed}: val {:.4}, test {test_accuracy:.4}",
        data.name,
        config.model.family,
        outcome.metadata.validation_accuracy
    );
    Ok(TrainedRun {
        model: outcome.model,
        dataset: data.name.clone(),
        attention,
        training: outcome.metadata,
        history: outcome.history,
        split_sizes: data.split_sizes(),
        test_accuracy,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub dataset: String,
    pub family: String,
    pub attention: AttentionMode,
    pub seed: u64,
    pub parameter_count: usize,
    pub split_sizes: BTreeMap<Split, usize>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
}

pub fn emit_run_metadata(run: &TrainedRun) -> RunMetadata {
    RunMetadata {
        dataset: run.dataset.clone(),
        family: run.model.family().to_string(),
        attention: run.attention,
        seed: run.training.seed,
        parameter_count: run.model.param_count(),
        split_sizes: run.split_sizes.clone(),
        epochs_run: run.training.epochs_run,
        best_epoch: run.training.best_epoch,
        validation_accuracy: run.training.validation_accuracy,
        test_accuracy: run.test_accuracy,
        wall_seconds: run.wall_seconds,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn checkpoint_path(dir: &Path, attention: AttentionMode, seed: u64) -> PathBuf {
    dir.join(format!("model-{attention}-seed{seed}.json"))
}

/// Writes the checkpoint, epoch history and metadata of a run; returns the
/// checkpoint path.
pub fn write_run(dir: &Path, run: &TrainedRun) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let seed = run.training.seed;
    let ckpt = checkpoint_path(dir, run.attention, seed);
    save_checkpoint(&run.model, &run.training, &ckpt)?;
    let history = dir.join(format!("history-{}-seed{seed}.jsonl", run.attention));
    write_history(&history, &run.history).map_err(io_err(&history))?;
    let meta = dir.join(format!("metadata-{}-seed{seed}.json", run.attention));
    let text = serde_json::to_string_pretty(&emit_run_metadata(run)).expect("metadata serializes");
    std::fs::write(&meta, text + "\n").map_err(io_err(&meta))?;
    Ok(ckpt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracy {
    pub mode: AttentionMode,
    pub test_accuracy: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Softmax and uniform attention trained on the same data and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub family: ModelFamily,
    pub seeds: Vec<u64>,
    pub softmax: ModeAccuracy,
    pub uniform: ModeAccuracy,
    /// Softmax mean minus uniform mean.
    pub gap: f64,
    /// Set when `|gap|` is within [`UNIFORM_MATCH_TOLERANCE`].
    pub uniform_matches: bool,
}

pub const UNIFORM_MATCH_TOLERANCE: f64 = 0.03;

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let row = |m: &ModeAccuracy| format!("| {} | {:.3} ± {:.3} |\n", m.mode, m.mean, m.std);
        let mut out = format!(
            "# {} ({}), seeds {:?}\n\n| attention | test accuracy |\n|---|---:|\n",
            self.dataset, self.family, self.seeds
        );
        out += &row(&self.uniform);
        out += &row(&self.softmax);
        out += &format!("\ngap {:.3}", self.gap);
        if self.uniform_matches {
            out += " (uniform attention matches softmax)";
        }
        out.push('\n');
        out
    }
}

/// Trains both attention modes over every configured seed.
pub fn run_ablation(config: &ExperimentConfig, data: &Dataset) -> Result<(AblationReport, Vec<TrainedRun>), PipelineError> {
    config.training.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut runs = Vec::new();
    let mut modes = Vec::new();
    for mode in [AttentionMode::Softmax, AttentionMode::Uniform] {
        let mut test = Vec::new();
        let mut val = Vec::new();
        for &seed in &config.training.seeds {
            let run = train_run(config, data, mode, seed)?;
            test.push(run.test_accuracy);
            val.push(run.training.validation_accuracy);
            runs.push(run);
        }
        let s = multi_seed_summary(&test).expect("at least one seed");
        modes.push(ModeAccuracy {
            mode,
            test_accuracy: test,
            validation_accuracy: val,
            mean: s.mean,
            std: s.std,
        });
    }
    let uniform = modes.pop().expect("two modes");
    let softmax = modes.pop().expect("two modes");
    let gap = softmax.mean - uniform.mean;
    Ok((
        AblationReport {
            dataset: data.name.clone(),
            family: config.model.family,
            seeds: config.training.seeds.clone(),
            softmax,
            uniform,
            gap,
            uniform_matches: gap.abs() <= UNIFORM_MATCH_TOLERANCE,
        },
        runs,
    ))
}

/// `n` distinct test instances in dataset order, chosen by `seed`.
pub fn sample_instances(data: &Dataset, n: usize, seed: u64) -> Result<Vec<&Instance>, PipelineError> {
    let test = data.split(Split::Test);
    if n > test.len() {
        return Err(PipelineError::Config(format!(
            "sample size {n} exceeds the {} test instances of {}",
            test.len(),
            data.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, test.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| test[i]).collect())
}

pub fn family_of(model: &Model) -> ModelFamily {
    match model.network {
        Network::Recurrent(_) => ModelFamily::Recurrent,
        Network::Transformer(_) => ModelFamily::Transformer,
    }
}

/// Explains one instance. `seed` drives every random choice, so results do
/// not depend on scheduling.
pub fn explain_instance(model: &Model, instance: &Instance, method: MethodId, config: &ExplainConfig, seed: u64) -> Result<Explanation, PipelineError> {
    let wrap = |source| PipelineError::Attribution {
        instance: instance.id.clone(),
        method,
        source,
    };
    if method.is_attention() {
        if !family_of(model).supports(method) {
            return Err(PipelineError::MethodMismatch {
                method,
                family: family_of(model),
            });
        }
        return Ok(explain_with_attention(model, instance, method, &config.rollout)?);
    }
    let subject = Subject::from_model(model, instance).map_err(wrap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = subject.pad_baseline();
    let backgrounds = || -> Result<Vec<_>, PipelineError> {
        let spec = match config.baseline {
            BaselineKind::Pad => BaselineSpec::default(),
            BaselineKind::TokenSet => BaselineSpec::token_set(model, config.backgrounds),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
        spec.build(&subject, &mut rng).map_err(wrap)
    };
    let agg = config.integrated_gradients.aggregation;
    let result = match method {
        MethodId::Lime => lime(
            &subject,
            None,
            &LimeConfig {
                seed: rng.random(),
                ..config.lime
            },
        ),
        MethodId::IntegratedGradients => integrated_gradients(&subject, None, &pad, &config.integrated_gradients),
        MethodId::Deeplift => deeplift(&subject, None, &pad, agg),
        MethodId::DeepShap => deep_shap(&subject, None, &backgrounds()?, agg),
        MethodId::GradShap => grad_shap(
            &subject,
            None,
            &backgrounds()?,
            &GradShapConfig {
                seed: rng.random(),
                ..config.grad_shap
            },
        ),
        MethodId::LeaveOneOut => leave_one_out(&subject, None),
        MethodId::RawAttention | MethodId::AttentionRollout | MethodId::AttentionFlow => unreachable!("handled above"),
    };
    result.map_err(wrap)
}

/// Every (instance, method) job, run concurrently; output is ordered by
/// instance, then by the first appearance of each method.
pub fn explain_instances(model: &Model, instances: &[&Instance], methods: &[MethodId], config: &ExplainConfig) -> Result<Vec<Explanation>, PipelineError> {
    let family = family_of(model);
    if let Some(&method) = methods.iter().find(|m| !family.supports(**m)) {
        return Err(PipelineError::MethodMismatch { method, family });
    }
    let mut distinct = Vec::new();
    for &m in methods {
        if !distinct.contains(&m) {
            distinct.push(m);
        }
    }
    let jobs: Vec<(usize, MethodId)> = (0..instances.len()).flat_map(|i| distinct.iter().map(move |&m| (i, m))).collect();
    jobs.par_iter()
        .map(|&(i, m)| {
            let seed = config.seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            explain_instance(model, instances[i], m, config, seed)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementRun {
    pub explanations: Vec<Explanation>,
    pub matrix: AgreementMatrix,
    pub summaries: Vec<Summary>,
}

impl AgreementRun {
    pub fn report(&self) -> Report {
        Report {
            matrices: vec![self.matrix.clone()],
            summaries: self.summaries.clone(),
        }
    }
}

/// Samples test instances, explains them with every configured method and
/// measures pairwise agreement.
pub fn run_agreement_experiment(config: &ExperimentConfig, data: &Dataset, model: &Model) -> Result<AgreementRun, PipelineError> {
    let methods = config.methods();
    check_methods(&methods, family_of(model))?;
    let instances = sample_instances(data, config.explain.sample_size, config.explain.seed)?;
    let explanations = explain_instances(model, &instances, &methods, &config.explain)?;
    let label = MatrixLabel {
        dataset: data.name.clone(),
        model: model.family().to_string(),
        task_type: data.task_type,
    };
    let matrix = agreement_matrix(&explanations, &methods, &config.explain.agreement, &label)?;
    let mut summaries = Vec::new();
    let matrices = std::slice::from_ref(&matrix);
    for scope in [Scope::All, Scope::Attention, Scope::NonAttention] {
        // a method list may lack attention or additive pairs
        if let Ok(s) = summarize(matrices, Grouping::Overall, scope) {
            summaries.extend(s);
        }
    }
    Ok(AgreementRun {
        explanations,
        matrix,
        summaries,
    })
}

pub const DUMP_FILE: &str = "attributions.jsonl";

/// Writes the attribution dump and the report in every format; returns the
/// written paths.
pub fn write_agreement_outputs(dir: &Path, run: &AgreementRun) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let dump = dir.join(DUMP_FILE);
    write_dump(&dump, &run.explanations).map_err(io_err(&dump))?;
    let mut paths = vec![dump];
    let report = run.report();
    for (format, ext) in [(ReportFormat::Markdown, "md"), (ReportFormat::Csv, "csv"), (ReportFormat::Json, "json")] {
        let path = dir.join(format!("agreement.{ext}"));
        std::fs::write(&path, render_report(&report, format)?).map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}
