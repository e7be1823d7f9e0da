use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Instance, Split, TaskType};
use crate::models::Vocab;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record { path: PathBuf, line: usize, message: String },
    #[error("{0}: no records")]
    Empty(PathBuf),
    #[error("{path}: {split:?} split is empty after filtering")]
    EmptySplit { path: PathBuf, split: Split },
    #[error("dataset mixes single- and pair-sequence records")]
    MixedTaskTypes,
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("synthetic datasets need at least {min} instances, got {size}")]
    TooSmall { size: usize, min: usize },
}

/// Length limits applied at load time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Filters {
    /// Single-sequence records longer than this are dropped.
    pub max_single_tokens: usize,
    /// Pair records whose combined length reaches this are dropped.
    pub pair_combined_limit: usize,
}

impl Default for Filters {
    fn default() -> Self {
        Self {
            max_single_tokens: 240,
            pair_combined_limit: 200,
        }
    }
}

impl Filters {
    pub fn keeps(&self, instance: &Instance) -> bool {
        match instance.task_type() {
            TaskType::Single => instance.tokens.len() <= self.max_single_tokens,
            TaskType::Pair => instance.combined_len() < self.pair_combined_limit,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub read: usize,
    pub dropped: BTreeMap<Split, usize>,
    pub kept: BTreeMap<Split, usize>,
}

impl FilterReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub task_type: TaskType,
    pub instances: Vec<Instance>,
    /// Built from the train split.
    pub vocab: Vocab,
    pub filter: FilterReport,
}

impl Dataset {
    /// Validates `instances` and builds the vocabulary; no filtering.
    pub fn from_instances(name: &str, instances: Vec<Instance>) -> Result<Self, DataError> {
        let task_type = instances.first().map_or(TaskType::Single, Instance::task_type);
        if instances.iter().any(|i| i.task_type() != task_type) {
            return Err(DataError::MixedTaskTypes);
        }
        let mut seen = HashSet::new();
        if let Some(dup) = instances.iter().find(|i| !seen.insert(i.id.as_str())) {
            return Err(DataError::DuplicateId(dup.id.clone()));
        }
        let vocab = Vocab::build(
            instances
                .iter()
                .filter(|i| i.split == Split::Train)
                .flat_map(|i| i.tokens.iter().chain(i.tokens2.iter().flatten()))
                .map(String::as_str),
        );
        let mut filter = FilterReport {
            read: instances.len(),
            ..FilterReport::default()
        };
        for i in &instances {
            *filter.kept.entry(i.split).or_default() += 1;
        }
        Ok(Self {
            name: name.into(),
            task_type,
            instances,
            vocab,
            filter,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Instance> {
        self.instances.iter().filter(|i| i.split == split).collect()
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut out: BTreeMap<Split, usize> = [Split::Train, Split::Validation, Split::Test].map(|s| (s, 0)).into();
        for i in &self.instances {
            *out.entry(i.split).or_default() += 1;
        }
        out
    }

    /// Writes the instances back as JSON lines.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for i in &self.instances {
            serde_json::to_writer(&mut out, i).map_err(|e| io(e.into()))?;
            out.write_all(b"\n").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

fn invalid(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Record {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a JSON-lines dataset, drops over-long records and builds the
/// vocabulary from what remains of the train split. Every split must be
/// non-empty afterwards. `task_type`, if given, is enforced per record.
pub fn load_dataset(path: &Path, task_type: Option<TaskType>, filters: &Filters) -> Result<Dataset, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut read = 0;
    let mut kept = Vec::new();
    let mut dropped: BTreeMap<Split, usize> = BTreeMap::new();
    for (n, line) in file.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| invalid(path, line_no, e.to_string()))?;
        if inst.tokens.is_empty() || inst.tokens2.as_ref().is_some_and(Vec::is_empty) {
            return Err(invalid(path, line_no, "empty token sequence"));
        }
        if let Some(t) = task_type.filter(|&t| t != inst.task_type()) {
            let expected = if t == TaskType::Pair { "pair records need `tokens2`" } else { "single-sequence records must not have `tokens2`" };
            return Err(invalid(path, line_no, expected));
        }
        read += 1;
        if filters.keeps(&inst) {
            kept.push(inst);
        } else {
            *dropped.entry(inst.split).or_default() += 1;
        }
    }
    if read == 0 {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    let mut data = Dataset::from_instances(&name, kept)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        if !data.filter.kept.contains_key(&split) {
            return Err(DataError::EmptySplit {
                path: path.to_path_buf(),
                split,
            });
        }
    }
    data.filter.read = read;
    data.filter.dropped = dropped;
    if data.filter.dropped_total() > 0 {
        log::info!("{}: dropped {} over-long records", path.display(), data.filter.dropped_total());
    }
    Ok(data)
}
