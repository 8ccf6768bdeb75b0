//! Risk scores `zeta = 1 - h(x)[answer]` for the LLM's stated answers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassIndex, Dataset, Instance};
use crate::error::{Error, Result};
use crate::harmonizer::{forward, HarmonizerParams, Simplex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarScore {
    pub id: String,
    pub llm: ClassIndex,
    pub zeta: f64,
    /// The harmonizer distribution; the entry at `llm` is stored as `1 - zeta`
    /// so that `zeta + dist[llm] == 1` holds exactly.
    pub dist: Simplex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub fn polar_score(params: &HarmonizerParams, inst: &Instance, llm_answer: ClassIndex) -> Result<PolarScore> {
    if llm_answer.0 >= params.k() {
        return Err(Error::LabelOutOfRange { label: llm_answer.0 as i64, k: params.k(), context: format!("llm answer of {:?}", inst.id) });
    }
    let mut dist = forward(params, &inst.features)?;
    let zeta = 1.0 - dist.get(llm_answer);
    dist.set(llm_answer, 1.0 - zeta);
    Ok(PolarScore { id: inst.id.clone(), llm: llm_answer, zeta, dist, config_digest: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    /// In dataset order, unsure instances omitted.
    pub scores: Vec<PolarScore>,
    /// Ids of instances whose LLM answer is unsure.
    pub skipped: Vec<String>,
}

pub fn score_batch(params: &HarmonizerParams, data: &Dataset) -> Result<ScoreBatch> {
    let results: Vec<Option<PolarScore>> = (0..data.n())
        .into_par_iter()
        .map(|i| data.row(i).llm.map(|a| polar_score(params, &data.instances()[i], a)).transpose())
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (inst, r) in data.instances().iter().zip(results) {
        match r {
            Some(s) => scores.push(s),
            None => skipped.push(inst.id.clone()),
        }
    }
    Ok(ScoreBatch { scores, skipped })
}

pub fn write_scores<W: Write>(scores: &[PolarScore], out: &mut W) -> Result<()> {
    for s in scores {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io("<scores>", e))?;
    }
    Ok(())
}

pub fn save_scores(scores: &[PolarScore], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_scores(scores, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: &Path) -> Result<Vec<PolarScore>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut scores = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let score: PolarScore = serde_json::from_str(&line).map_err(|e| Error::Malformed(e.to_string()).at_line(i + 1))?;
        if !(0.0..=1.0).contains(&score.zeta) {
            return Err(Error::Malformed(format!("zeta {} outside [0, 1]", score.zeta)).at_line(i + 1));
        }
        scores.push(score);
    }
    Ok(scores)
}
