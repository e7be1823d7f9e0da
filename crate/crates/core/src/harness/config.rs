use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_synthetic, load_dataset, Dataset, Filters, PipelineError, SyntheticTask};
use crate::agreement::AgreementOptions;
use crate::attention::RolloutConfig;
use crate::attribution::{GradShapConfig, IgConfig, LimeConfig, MethodId};
use crate::data::TaskType;
use crate::models::AttentionMode;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    #[default]
    Recurrent,
    Transformer,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Recurrent => "recurrent",
            Self::Transformer => "transformer",
        }
    }

    /// Whether an attention-based method reads this family's attention.
    pub fn supports(self, method: MethodId) -> bool {
        match method {
            MethodId::RawAttention => self == Self::Recurrent,
            MethodId::AttentionRollout | MethodId::AttentionFlow => self == Self::Transformer,
            _ => true,
        }
    }

    /// The attention method plus the five feature-additive methods.
    pub fn default_methods(self) -> Vec<MethodId> {
        let attention = match self {
            Self::Recurrent => MethodId::RawAttention,
            Self::Transformer => MethodId::AttentionRollout,
        };
        vec![
            attention,
            MethodId::Lime,
            MethodId::IntegratedGradients,
            MethodId::Deeplift,
            MethodId::GradShap,
            MethodId::DeepShap,
        ]
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recurrent" | "bilstm" => Ok(Self::Recurrent),
            "transformer" => Ok(Self::Transformer),
            _ => Err(format!("unknown model family `{s}` (expected recurrent or transformer)")),
        }
    }
}

/// Either a JSON-lines file or a generated task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticTask>,
    /// Instances to generate.
    pub size: Option<usize>,
    /// Generation seed.
    pub seed: u64,
    /// Enforced per record when reading a file.
    pub task_type: Option<TaskType>,
    pub filters: Filters,
}

pub const DEFAULT_SYNTHETIC_SIZE: usize = 1000;

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        match (&self.path, &self.synthetic) {
            (Some(_), Some(_)) => Err(PipelineError::Config("dataset: set either `path` or `synthetic`, not both".into())),
            (None, None) => Err(PipelineError::Config("dataset: one of `path` or `synthetic` is required".into())),
            (Some(_), None) if self.size.is_some() => Err(PipelineError::Config("dataset: `size` only applies to synthetic data".into())),
            _ => Ok(()),
        }
    }

    pub fn load(&self) -> Result<Dataset, PipelineError> {
        self.validate()?;
        Ok(match (&self.path, self.synthetic) {
            (Some(path), _) => load_dataset(path, self.task_type, &self.filters)?,
            (None, Some(task)) => generate_synthetic(task, self.size.unwrap_or(DEFAULT_SYNTHETIC_SIZE), self.seed)?,
            (None, None) => unreachable!("validated"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecurrentSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
}

impl Default for RecurrentSettings {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 32,
            attention_dim: 32,
        }
    }
}

impl RecurrentSettings {
    /// 300-dim embeddings, 128-dim encoder state.
    pub fn full_size() -> Self {
        Self {
            embed_dim: 300,
            hidden_dim: 128,
            attention_dim: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerSettings {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for TransformerSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 3,
            ff_dim: 64,
            max_len: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub attention: AttentionMode,
    pub num_classes: Option<usize>,
    pub recurrent: RecurrentSettings,
    pub transformer: TransformerSettings,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// The `[PAD]` embedding.
    #[default]
    Pad,
    /// Random vocabulary embeddings, for the SHAP variants.
    TokenSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Empty means the family's attention method plus the five
    /// feature-additive methods.
    pub methods: Vec<MethodId>,
    pub sample_size: usize,
    pub seed: u64,
    pub baseline: BaselineKind,
    /// References for Deep-SHAP and Grad-SHAP.
    pub backgrounds: usize,
    pub integrated_gradients: IgConfig,
    pub lime: LimeConfig,
    pub grad_shap: GradShapConfig,
    pub rollout: RolloutConfig,
    pub agreement: AgreementOptions,
}

pub const DEFAULT_SAMPLE_SIZE: usize = 500;

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            methods: Vec::new(),
            sample_size: DEFAULT_SAMPLE_SIZE,
            seed: 0,
            baseline: BaselineKind::Pad,
            backgrounds: 1,
            integrated_gradients: IgConfig::default(),
            lime: LimeConfig::default(),
            grad_shap: GradShapConfig::default(),
            rollout: RolloutConfig::default(),
            agreement: AgreementOptions::default(),
        }
    }
}

impl ExplainConfig {
    pub fn methods_for(&self, family: ModelFamily) -> Vec<MethodId> {
        if self.methods.is_empty() {
            family.default_methods()
        } else {
            self.methods.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub explain: ExplainConfig,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            training: TrainConfig::default(),
            explain: ExplainConfig::default(),
            output: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML file; relative dataset and output paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(msg) => PipelineError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = config.dataset.path.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        if config.output.is_relative() {
            config.output = base.join(&config.output);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn methods(&self) -> Vec<MethodId> {
        self.explain.methods_for(self.model.family)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.dataset.validate()?;
        self.training
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.explain.sample_size == 0 {
            return Err(PipelineError::Config("explain.sample_size must be ≥ 1".into()));
        }
        if self.explain.backgrounds == 0 {
            return Err(PipelineError::Config("explain.backgrounds must be ≥ 1".into()));
        }
        if self.model.num_classes.is_some_and(|c| c < 2) {
            return Err(PipelineError::Config("model.num_classes must be ≥ 2".into()));
        }
        check_methods(&self.methods(), self.model.family)
    }
}

/// Rejects attention methods that do not apply to `family`.
pub fn check_methods(methods: &[MethodId], family: ModelFamily) -> Result<(), PipelineError> {
    if let Some(&method) = methods.iter().find(|m| !family.supports(**m)) {
        return Err(PipelineError::MethodMismatch { method, family });
    }
    if methods.len() < 2 {
        return Err(PipelineError::Config(format!("need at least 2 methods to compare, got {}", methods.len())));
    }
    Ok(())
}
