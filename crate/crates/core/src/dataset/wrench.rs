//! Importer for weak-supervision benchmark splits (`train.json`, `valid.json`,
//! `test.json`) plus the LLM-answer and feature sidecars.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use super::{ClassSpace, Dataset, Instance, SourceLabelMatrix, Split};
use crate::error::{Error, Result};

pub const LLM_SIDECAR: &str = "llm_answers.jsonl";
pub const FEATURE_SIDECAR: &str = "features.jsonl";

#[derive(Debug, Deserialize)]
struct Example {
    label: Option<i64>,
    weak_labels: Vec<i64>,
    #[serde(default)]
    data: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct LlmRecord {
    id: String,
    llm: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct FeatureRecord {
    id: String,
    features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WrenchImport {
    pub dataset: Dataset,
    /// Ids with no record in the LLM sidecar; their LLM answer is absent.
    pub missing_llm: Vec<String>,
}

fn split_file(split: Split) -> &'static str {
    match split {
        Split::Train => "train.json",
        Split::Dev => "valid.json",
        Split::Test => "test.json",
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())).at_line(i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingSidecar(path))
    }
}

/// Numeric ids sort numerically, everything else lexicographically after them.
fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Imports one split of a benchmark directory.
///
/// Weak label `-1` maps to an untriggered source. The class space comes from
/// `label.json` when present, otherwise from the largest label observed.
pub fn import_wrench(dir: &Path, split: Split) -> Result<WrenchImport> {
    let split_path = dir.join(split_file(split));
    let examples: BTreeMap<String, Example> =
        serde_json::from_reader(open(&split_path)?).map_err(|e| Error::Malformed(format!("{}: {e}", split_path.display())))?;
    let llm_path = require(dir.join(LLM_SIDECAR))?;
    let feature_path = require(dir.join(FEATURE_SIDECAR))?;

    let mut ids: Vec<&String> = examples.keys().collect();
    ids.sort_by(|a, b| id_order(a, b));

    let space = class_space(dir, &examples)?;
    let llm: HashMap<String, Option<i64>> = read_jsonl::<LlmRecord>(&llm_path)?.into_iter().map(|r| (r.id, r.llm)).collect();
    let features: HashMap<String, Vec<f64>> = read_jsonl::<FeatureRecord>(&feature_path)?.into_iter().map(|r| (r.id, r.features)).collect();

    let m = examples.values().next().map_or(0, |e| e.weak_labels.len());
    let mut instances = Vec::with_capacity(ids.len());
    let mut llm_answers = Vec::with_capacity(ids.len());
    let mut rows = Vec::with_capacity(ids.len());
    let mut missing_llm = Vec::new();

    for id in ids {
        let ex = &examples[id];
        if ex.weak_labels.len() != m {
            return Err(Error::DimensionMismatch {
                context: format!("weak_labels of example {id:?}"),
                expected: m,
                found: ex.weak_labels.len(),
            });
        }
        let row = ex
            .weak_labels
            .iter()
            .enumerate()
            .map(|(j, &w)| match w {
                -1 => Ok(None),
                v => space.check(v, || format!("weak label {} of example {id:?}", j + 1)).map(Some),
            })
            .collect::<Result<Vec<_>>>()?;
        let llm_answer = match llm.get(id) {
            Some(answer) => answer.map(|v| space.check(v, || format!("sidecar llm answer of {id:?}"))).transpose()?,
            None => {
                missing_llm.push(id.clone());
                None
            }
        };
        let feats = features
            .get(id)
            .cloned()
            .ok_or_else(|| Error::InvalidDataset(format!("no features for example {id:?} in {FEATURE_SIDECAR}")))?;
        let gold = match (split, ex.label) {
            (Split::Train, _) | (_, None) => None,
            (_, Some(-1)) => None,
            (_, Some(l)) => Some(space.check(l, || format!("label of example {id:?}"))?),
        };
        let text = ex.data.as_ref().and_then(|d| d.get("text")).and_then(Value::as_str).map(str::to_owned);
        let entities = ex
            .data
            .as_ref()
            .map(|d| ["entity1", "entity2"].iter().filter_map(|k| d.get(*k).and_then(Value::as_str).map(str::to_owned)).collect())
            .unwrap_or_default();
        instances.push(Instance { id: id.clone(), features: feats, text, entities, gold });
        llm_answers.push(llm_answer);
        rows.push(row);
    }

    let labels = SourceLabelMatrix::new(llm_answers, rows, m)?;
    let dataset = Dataset::new(space, instances, labels, split)?;
    Ok(WrenchImport { dataset, missing_llm })
}

fn class_space(dir: &Path, examples: &BTreeMap<String, Example>) -> Result<ClassSpace> {
    let label_path = dir.join("label.json");
    if label_path.is_file() {
        let names: BTreeMap<String, String> = serde_json::from_reader(open(&label_path)?)?;
        let mut pairs = names
            .into_iter()
            .map(|(k, v)| k.parse::<usize>().map(|i| (i, v)).map_err(|_| Error::Malformed(format!("label.json key {k:?} is not an index"))))
            .collect::<Result<Vec<_>>>()?;
        pairs.sort_by_key(|(i, _)| *i);
        if pairs.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
            return Err(Error::Malformed("label.json indices are not contiguous from 0".into()));
        }
        return ClassSpace::new(pairs.into_iter().map(|(_, v)| v).collect());
    }
    let mut max_label = 1i64;
    for (id, ex) in examples {
        for &v in ex.label.iter().chain(&ex.weak_labels) {
            if v < -1 {
                return Err(Error::LabelOutOfRange { label: v, k: 0, context: format!("example {id:?}") });
            }
            max_label = max_label.max(v);
        }
    }
    ClassSpace::numbered(max_label as usize + 1)
}
