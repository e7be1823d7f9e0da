//! Datasets, synthetic tasks and the end-to-end experiment pipeline.

mod config;
mod dataset;
mod pipeline;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::agreement::AgreementError;
use crate::attention::AttentionError;
use crate::attribution::{AttributionError, MethodId};
use crate::models::CheckpointError;
use crate::trainer::TrainError;

pub use config::{
    check_methods, BaselineKind, DatasetSpec, ExperimentConfig, ExplainConfig, ModelFamily, ModelSpec, RecurrentSettings,
    TransformerSettings, DEFAULT_SAMPLE_SIZE, DEFAULT_SYNTHETIC_SIZE,
};
pub use dataset::{load_dataset, DataError, Dataset, FilterReport, Filters};
pub use pipeline::{
    build_model, checkpoint_path, emit_run_metadata, explain_instance, explain_instances, family_of, run_ablation,
    run_agreement_experiment, sample_instances, train_run, write_agreement_outputs, write_run, AblationReport, AgreementRun,
    ModeAccuracy, RunMetadata, TrainedRun, DUMP_FILE, UNIFORM_MATCH_TOLERANCE,
};
pub use synth::{generate_synthetic, oracle_label, SyntheticTask, MIN_SIZE, NEEDLE_TRIGGERS, OVERLAP_THRESHOLD};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("method {method} does not apply to the {family} model")]
    MethodMismatch { method: MethodId, family: ModelFamily },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{method} on instance `{instance}`: {source}")]
    Attribution {
        instance: String,
        method: MethodId,
        #[source]
        source: AttributionError,
    },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 1 for configuration problems, 2 for bad input data, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::MethodMismatch { .. } => 1,
            Self::Data(_) => 2,
            _ => 3,
        }
    }
}
