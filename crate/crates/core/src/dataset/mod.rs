//! Instances, the source label matrix, and the canonical JSONL format.
//!
//! Source index 0 is always the LLM; external sources occupy indices `1..=m`.
//! An absent answer means the source was not triggered (or, for the LLM, that
//! it answered "unsure").

mod jsonl;
mod synthetic;
mod wrench;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use jsonl::{load_dataset, load_dataset_with, read_dataset, save_dataset, write_dataset, LoadOptions};
pub use synthetic::{generate_synthetic, SynthConfig, SyntheticData};
pub use wrench::{import_wrench, WrenchImport};

/// Index of an answer class, always `< K` for the owning [`ClassSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassIndex(pub usize);

impl ClassIndex {
    pub fn get(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// The quantized answer space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSpace {
    labels: Vec<String>,
}

impl ClassSpace {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidDataset(format!("class space needs at least 2 labels, got {}", labels.len())));
        }
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::InvalidDataset(format!("class label {i} is empty")));
            }
            if labels[..i].contains(label) {
                return Err(Error::InvalidDataset(format!("duplicate class label {label:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// `class0`, `class1`, ... for `k` classes.
    pub fn numbered(k: usize) -> Result<Self> {
        Self::new((0..k).map(|c| format!("class{c}")).collect())
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, class: ClassIndex) -> &str {
        &self.labels[class.0]
    }

    pub fn index_of(&self, name: &str) -> Option<ClassIndex> {
        self.labels.iter().position(|l| l == name).map(ClassIndex)
    }

    pub fn check(&self, label: i64, context: impl FnOnce() -> String) -> Result<ClassIndex> {
        if label < 0 || label as usize >= self.k() {
            return Err(Error::LabelOutOfRange { label, k: self.k(), context: context() });
        }
        Ok(ClassIndex(label as usize))
    }
}

impl TryFrom<Vec<String>> for ClassSpace {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<ClassSpace> for Vec<String> {
    fn from(space: ClassSpace) -> Self {
        space.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub features: Vec<f64>,
    /// Raw input text, used only when building prompts.
    pub text: Option<String>,
    /// Named entities substituted into prompt templates (`{ENTITY1}`, `{ENTITY2}`).
    pub entities: Vec<String>,
    pub gold: Option<ClassIndex>,
}

/// Answers of the LLM and the `m` external sources, one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceLabelMatrix {
    m: usize,
    llm: Vec<Option<ClassIndex>>,
    sources: Vec<Option<ClassIndex>>,
}

impl SourceLabelMatrix {
    /// `sources` holds one row of `m` entries per instance.
    pub fn new(llm: Vec<Option<ClassIndex>>, sources: Vec<Vec<Option<ClassIndex>>>, m: usize) -> Result<Self> {
        if llm.len() != sources.len() {
            return Err(Error::InvalidDataset(format!("{} llm answers but {} source rows", llm.len(), sources.len())));
        }
        let mut flat = Vec::with_capacity(sources.len() * m);
        for (i, row) in sources.into_iter().enumerate() {
            if row.len() != m {
                return Err(Error::DimensionMismatch { context: format!("source row {i}"), expected: m, found: row.len() });
            }
            flat.extend(row);
        }
        Ok(Self { m, llm, sources: flat })
    }

    pub fn n(&self) -> usize {
        self.llm.len()
    }

    /// Number of external sources, excluding the LLM.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> LabelRow<'_> {
        LabelRow { llm: self.llm[i], sources: &self.sources[i * self.m..(i + 1) * self.m] }
    }

    pub fn llm_answers(&self) -> &[Option<ClassIndex>] {
        &self.llm
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = LabelRow<'_>> + '_ {
        (0..self.n()).map(move |i| self.row(i))
    }

    pub fn triggered_count(&self) -> usize {
        self.llm.iter().chain(&self.sources).filter(|a| a.is_some()).count()
    }

    fn validate(&self, k: usize) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            for j in 0..row.len() {
                if let Some(c) = row.answer(j) {
                    if c.0 >= k {
                        return Err(Error::LabelOutOfRange { label: c.0 as i64, k, context: format!("instance {i}, source {j}") });
                    }
                }
            }
        }
        Ok(())
    }
}

/// One instance's answers; index 0 is the LLM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRow<'a> {
    pub llm: Option<ClassIndex>,
    pub sources: &'a [Option<ClassIndex>],
}

impl<'a> LabelRow<'a> {
    /// `m + 1`.
    pub fn len(&self) -> usize {
        self.sources.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn answer(&self, j: usize) -> Option<ClassIndex> {
        if j == 0 {
            self.llm
        } else {
            self.sources[j - 1]
        }
    }

    pub fn answers(&self) -> impl Iterator<Item = Option<ClassIndex>> + 'a {
        std::iter::once(self.llm).chain(self.sources.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    class_space: ClassSpace,
    instances: Vec<Instance>,
    labels: SourceLabelMatrix,
    split: Split,
}

impl Dataset {
    pub fn new(class_space: ClassSpace, instances: Vec<Instance>, labels: SourceLabelMatrix, split: Split) -> Result<Self> {
        if instances.len() != labels.n() {
            return Err(Error::InvalidDataset(format!("{} instances but {} label rows", instances.len(), labels.n())));
        }
        let d = instances.first().map_or(0, |inst| inst.features.len());
        let mut seen = std::collections::HashSet::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate instance id {:?}", inst.id)));
            }
            if inst.features.len() != d {
                return Err(Error::DimensionMismatch {
                    context: format!("features of instance {:?}", inst.id),
                    expected: d,
                    found: inst.features.len(),
                });
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of instance {i} ({:?})", inst.id)));
            }
            if let Some(g) = inst.gold {
                if g.0 >= class_space.k() {
                    return Err(Error::LabelOutOfRange {
                        label: g.0 as i64,
                        k: class_space.k(),
                        context: format!("gold label of instance {:?}", inst.id),
                    });
                }
            }
        }
        labels.validate(class_space.k())?;
        Ok(Self { class_space, instances, labels, split })
    }

    pub fn class_space(&self) -> &ClassSpace {
        &self.class_space
    }

    pub fn k(&self) -> usize {
        self.class_space.k()
    }

    pub fn n(&self) -> usize {
        self.instances.len()
    }

    /// Feature dimension (0 for an empty dataset).
    pub fn d(&self) -> usize {
        self.instances.first().map_or(0, |inst| inst.features.len())
    }

    pub fn m(&self) -> usize {
        self.labels.m()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn labels(&self) -> &SourceLabelMatrix {
        &self.labels
    }

    pub fn row(&self, i: usize) -> LabelRow<'_> {
        self.labels.row(i)
    }

    pub fn has_gold(&self) -> bool {
        self.instances.iter().any(|inst| inst.gold.is_some())
    }

    /// Removes every gold label.
    pub fn erase_gold(mut self) -> Self {
        for inst in &mut self.instances {
            inst.gold = None;
        }
        self
    }

    /// Retags the split; moving to `Train` erases gold labels.
    pub fn into_split(self, split: Split) -> Self {
        let mut out = if split == Split::Train { self.erase_gold() } else { self };
        out.split = split;
        out
    }

    /// Drops every external source, keeping only the LLM column (`m = 0`).
    pub fn without_sources(&self) -> Self {
        let labels = SourceLabelMatrix { m: 0, llm: self.labels.llm.clone(), sources: Vec::new() };
        Self { class_space: self.class_space.clone(), instances: self.instances.clone(), labels, split: self.split }
    }

    /// Keeps the given external source columns (1-based source indices), in order.
    pub fn select_sources(&self, columns: &[usize]) -> Result<Self> {
        let m = self.m();
        if let Some(&bad) = columns.iter().find(|&&j| j == 0 || j > m) {
            return Err(Error::InvalidConfig(format!("source column {bad} not in 1..={m}")));
        }
        let rows = self.labels.rows().map(|row| columns.iter().map(|&j| row.answer(j)).collect()).collect();
        let labels = SourceLabelMatrix::new(self.labels.llm.clone(), rows, columns.len())?;
        Ok(Self { class_space: self.class_space.clone(), instances: self.instances.clone(), labels, split: self.split })
    }

    /// Instances `range` as a new split (gold erased when `split` is train).
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> Result<Self> {
        if range.start > range.end || range.end > self.n() {
            return Err(Error::InvalidConfig(format!("slice {range:?} out of bounds for n={}", self.n())));
        }
        let rows = range.clone().map(|i| self.labels.row(i).sources.to_vec()).collect();
        let labels = SourceLabelMatrix::new(self.labels.llm[range.clone()].to_vec(), rows, self.m())?;
        let out = Self { class_space: self.class_space.clone(), instances: self.instances[range].to_vec(), labels, split: self.split };
        Ok(out.into_split(split))
    }
}
