//! Classification instances as read from dataset JSON lines.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Single-sequence (sentiment) or pair-sequence (inference, paraphrase).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    Single,
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens2: Option<Vec<String>>,
    pub label: usize,
    pub split: Split,
}

impl Instance {
    pub fn single(id: impl Into<String>, tokens: &[&str], label: usize, split: Split) -> Self {
        Self {
            id: id.into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            tokens2: None,
            label,
            split,
        }
    }

    pub fn pair(id: impl Into<String>, a: &[&str], b: &[&str], label: usize, split: Split) -> Self {
        Self {
            tokens2: Some(b.iter().map(|t| t.to_string()).collect()),
            ..Self::single(id, a, label, split)
        }
    }

    pub fn task_type(&self) -> TaskType {
        if self.tokens2.is_some() {
            TaskType::Pair
        } else {
            TaskType::Single
        }
    }

    /// Token count summed over both sequences.
    pub fn combined_len(&self) -> usize {
        self.tokens.len() + self.tokens2.as_ref().map_or(0, Vec::len)
    }
}
