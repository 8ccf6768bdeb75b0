//! Quantization of free-text LLM replies into the class space.

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassIndex, ClassSpace};
use crate::error::{Error, Result};

pub const DEFAULT_UNSURE_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapped {
    Class(ClassIndex),
    /// "unsure" appears near the start of the reply.
    Unsure,
    /// No class pattern matched.
    Unmapped,
}

impl Mapped {
    pub fn class(self) -> Option<ClassIndex> {
        match self {
            Mapped::Class(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMapper")]
pub struct AnswerMapper {
    label_patterns: Vec<Vec<String>>,
    unsure_prefix_window: usize,
}

#[derive(Deserialize)]
struct RawMapper {
    label_patterns: Vec<Vec<String>>,
    #[serde(default = "default_window")]
    unsure_prefix_window: usize,
}

fn default_window() -> usize {
    DEFAULT_UNSURE_WINDOW
}

impl TryFrom<RawMapper> for AnswerMapper {
    type Error = Error;

    fn try_from(raw: RawMapper) -> Result<Self> {
        AnswerMapper::new(raw.label_patterns, raw.unsure_prefix_window)
    }
}

impl AnswerMapper {
    pub fn new(label_patterns: Vec<Vec<String>>, unsure_prefix_window: usize) -> Result<Self> {
        if label_patterns.len() < 2 {
            return Err(Error::InvalidConfig("answer mapper needs patterns for at least two classes".into()));
        }
        for (c, patterns) in label_patterns.iter().enumerate() {
            if patterns.is_empty() || patterns.iter().any(|p| p.trim().is_empty()) {
                return Err(Error::InvalidConfig(format!("class {c} needs at least one non-empty pattern")));
            }
        }
        let label_patterns = label_patterns.into_iter().map(|ps| ps.into_iter().map(|p| p.to_lowercase()).collect()).collect();
        Ok(Self { label_patterns, unsure_prefix_window })
    }

    /// One pattern per class: its name.
    pub fn from_class_space(space: &ClassSpace) -> Self {
        Self {
            label_patterns: space.labels().iter().map(|l| vec![l.to_lowercase()]).collect(),
            unsure_prefix_window: DEFAULT_UNSURE_WINDOW,
        }
    }

    pub fn k(&self) -> usize {
        self.label_patterns.len()
    }

    /// Case-insensitive. The earliest pattern match wins; ties go to the lower class.
    pub fn map_response(&self, text: &str) -> Mapped {
        let lower = text.to_lowercase();
        let prefix: String = lower.chars().take(self.unsure_prefix_window).collect();
        if prefix.contains("unsure") {
            return Mapped::Unsure;
        }
        let mut best: Option<(usize, usize)> = None;
        for (c, patterns) in self.label_patterns.iter().enumerate() {
            for p in patterns {
                if let Some(pos) = lower.find(p.as_str()) {
                    if best.map_or(true, |(b, _)| pos < b) {
                        best = Some((pos, c));
                    }
                }
            }
        }
        best.map_or(Mapped::Unmapped, |(_, c)| Mapped::Class(ClassIndex(c)))
    }
}
