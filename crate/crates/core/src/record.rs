//! Benchmark ground truth and the small vocabulary of decisions shared by
//! the parser, reward engine and metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scene {
    Texture,
    Workpiece,
    Electronic,
    Logical,
}

impl Scene {
    pub const ALL: [Scene; 4] = [
        Scene::Texture,
        Scene::Workpiece,
        Scene::Electronic,
        Scene::Logical,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scene::Texture => "texture",
            Scene::Workpiece => "workpiece",
            Scene::Electronic => "electronic",
            Scene::Logical => "logical",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Scene::Texture => "Texture",
            Scene::Workpiece => "Workpiece",
            Scene::Electronic => "Electronic",
            Scene::Logical => "Logical",
        }
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth anomaly status of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn verdict(self) -> Verdict {
        match self {
            Label::Normal => Verdict::No,
            Label::Anomalous => Verdict::Yes,
        }
    }
}

/// A definite yes/no anomaly decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

impl Verdict {
    pub fn flip(self) -> Verdict {
        match self {
            Verdict::Yes => Verdict::No,
            Verdict::No => Verdict::Yes,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Yes => "yes",
            Verdict::No => "no",
        }
    }
}

#[derive(Debug, Error)]
#[error("expected `yes` or `no`, got {0:?}")]
pub struct ParseVerdictError(String);

impl FromStr for Verdict {
    type Err = ParseVerdictError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Verdict::Yes),
            "no" => Ok(Verdict::No),
            _ => Err(ParseVerdictError(s.to_string())),
        }
    }
}

/// Final answer as parsed from `<answer>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Missing,
}

impl Answer {
    pub fn verdict(self) -> Option<Verdict> {
        match self {
            Answer::Yes => Some(Verdict::Yes),
            Answer::No => Some(Verdict::No),
            Answer::Missing => None,
        }
    }
}

impl From<Verdict> for Answer {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Yes => Answer::Yes,
            Verdict::No => Answer::No,
        }
    }
}

/// Pre-reflection decision recovered from the `<think>` text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Yes,
    No,
    Unknown,
}

impl Decision {
    pub fn verdict(self) -> Option<Verdict> {
        match self {
            Decision::Yes => Some(Verdict::Yes),
            Decision::No => Some(Verdict::No),
            Decision::Unknown => None,
        }
    }
}

impl From<Verdict> for Decision {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Yes => Decision::Yes,
            Verdict::No => Decision::No,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("sample {id}: normal samples must not carry types or boxes")]
    NormalWithAnnotations { id: String },
    #[error("sample {id}: anomalous samples need at least one type and one box")]
    AnomalousWithoutAnnotations { id: String },
    #[error("sample {id}: {label:?} is not a leaf label of the taxonomy")]
    UnknownType { id: String, label: String },
    #[error("sample {id}: duplicate type {label:?}")]
    DuplicateType { id: String, label: String },
}

/// One benchmark sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub image: String,
    pub scene: Scene,
    pub category: String,
    pub label: Label,
    pub types: Vec<String>,
    pub boxes: Vec<BBox>,
}

impl GroundTruthRecord {
    /// Checks the label/annotation invariants and that every type is a
    /// taxonomy leaf.
    pub fn validate(&self, taxonomy: &crate::taxonomy::Taxonomy) -> Result<(), RecordError> {
        let id = || self.sample_id.clone();
        match self.label {
            Label::Normal if !self.types.is_empty() || !self.boxes.is_empty() => {
                return Err(RecordError::NormalWithAnnotations { id: id() });
            }
            Label::Anomalous if self.types.is_empty() || self.boxes.is_empty() => {
                return Err(RecordError::AnomalousWithoutAnnotations { id: id() });
            }
            _ => {}
        }
        for (i, t) in self.types.iter().enumerate() {
            if !taxonomy.is_leaf(t) {
                return Err(RecordError::UnknownType {
                    id: id(),
                    label: t.clone(),
                });
            }
            if self.types[..i].contains(t) {
                return Err(RecordError::DuplicateType {
                    id: id(),
                    label: t.clone(),
                });
            }
        }
        Ok(())
    }
}
