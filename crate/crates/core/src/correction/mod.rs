//! Threshold-gated follow-up prompting: instances whose risk score exceeds
//! `delta` are asked again, either plainly or with evidence from the
//! triggered sources, and the reply replaces the original answer when it maps
//! to a class.

mod client;
mod mapper;
mod prompts;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use client::{ChatRequest, HttpClient, HttpConfig, LlmClient, Message, ReplayClient, TOKEN_ENV};
pub use mapper::{AnswerMapper, Mapped, DEFAULT_UNSURE_WINDOW};
pub use prompts::{PromptBundle, TemplateContext};

use crate::dataset::{ClassIndex, ClassSpace, Dataset, Instance, LabelRow};
use crate::error::{Error, Result};
use crate::harmonizer::HarmonizerParams;
use crate::polar::{polar_score, PolarScore};

pub const DEFAULT_DELTA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SelfVerify,
    Rag,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_verify" => Ok(Strategy::SelfVerify),
            "rag" => Ok(Strategy::Rag),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::SelfVerify => "self_verify",
            Strategy::Rag => "rag",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionPolicy {
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub strategy: Strategy,
    /// One template per source `1..=m`, used by the rag strategy.
    #[serde(default)]
    pub source_descriptions: Vec<String>,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

impl CorrectionPolicy {
    pub fn self_verify(delta: f64) -> Self {
        Self { delta, strategy: Strategy::SelfVerify, source_descriptions: Vec::new() }
    }

    pub fn rag(delta: f64, source_descriptions: Vec<String>) -> Self {
        Self { delta, strategy: Strategy::Rag, source_descriptions }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!("delta {} must lie in [0, 1]", self.delta)));
        }
        if self.strategy == Strategy::Rag && self.source_descriptions.len() != m {
            return Err(Error::InvalidConfig(format!(
                "rag needs one description per source: {} given for m={m}",
                self.source_descriptions.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Keep,
    FollowUp,
}

/// Follow up iff `zeta > delta`.
pub fn decide(policy: &CorrectionPolicy, score: &PolarScore) -> Action {
    if score.zeta > policy.delta {
        Action::FollowUp
    } else {
        Action::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FollowUp {
    pub prompt: String,
    /// The strategy actually used.
    pub strategy: Strategy,
    /// Rag was requested but no source fired.
    pub fell_back: bool,
}

/// The follow-up message. Rag lists one evidence line per triggered source in
/// ascending source order between the preamble and the verification question.
pub fn build_followup(
    policy: &CorrectionPolicy,
    bundle: &PromptBundle,
    space: &ClassSpace,
    inst: &Instance,
    row: LabelRow<'_>,
) -> FollowUp {
    let ctx = TemplateContext { inst, space, previous: row.llm };
    let verify = ctx.render(&bundle.followup_self_verify);
    if policy.strategy == Strategy::SelfVerify {
        return FollowUp { prompt: verify, strategy: Strategy::SelfVerify, fell_back: false };
    }
    let evidence: Vec<String> = row
        .sources
        .iter()
        .zip(&policy.source_descriptions)
        .filter_map(|(answer, desc)| answer.map(|a| ctx.render_with_answer(desc, Some(a))))
        .collect();
    if evidence.is_empty() {
        return FollowUp { prompt: verify, strategy: Strategy::SelfVerify, fell_back: true };
    }
    let mut prompt = ctx.render(&bundle.followup_rag_preamble);
    for line in evidence {
        prompt.push('\n');
        prompt.push_str(&line);
    }
    prompt.push('\n');
    prompt.push_str(&verify);
    FollowUp { prompt, strategy: Strategy::Rag, fell_back: false }
}

/// The full conversation sent for a follow-up.
pub fn build_request(bundle: &PromptBundle, space: &ClassSpace, inst: &Instance, row: LabelRow<'_>, followup: &FollowUp) -> ChatRequest {
    let ctx = TemplateContext { inst, space, previous: row.llm };
    ChatRequest {
        id: inst.id.clone(),
        strategy: followup.strategy,
        messages: vec![
            Message::system(bundle.system_message(&ctx)),
            Message::user(bundle.task_message(&ctx)),
            Message::user(followup.prompt.clone()),
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// LLM answer was unsure; nothing to score.
    Unscored,
    /// Score at or below the threshold.
    Kept,
    /// The follow-up reply mapped to a class.
    Updated,
    /// The follow-up reply matched no class; old answer kept.
    Unmapped,
    /// The follow-up reply was unsure; old answer kept.
    UnsureReply,
    /// The client failed after retries; old answer kept.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub id: String,
    pub old_answer: Option<ClassIndex>,
    pub zeta: Option<f64>,
    pub action: Action,
    pub new_answer: Option<ClassIndex>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fell_back: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_text: Option<String>,
}

/// Scores every instance, follows up on those above the threshold, and maps
/// the replies. Output order matches the dataset.
pub fn correct_batch(
    client: &dyn LlmClient,
    policy: &CorrectionPolicy,
    bundle: &PromptBundle,
    mapper: &AnswerMapper,
    params: &HarmonizerParams,
    data: &Dataset,
) -> Result<Vec<CorrectionRecord>> {
    policy.validate(data.m())?;
    if mapper.k() != data.k() {
        return Err(Error::DimensionMismatch { context: "answer mapper classes".into(), expected: data.k(), found: mapper.k() });
    }
    let mut records = Vec::with_capacity(data.n());
    let mut jobs = Vec::new();
    for (i, inst) in data.instances().iter().enumerate() {
        let row = data.row(i);
        let Some(answer) = row.llm else {
            records.push(CorrectionRecord {
                id: inst.id.clone(),
                old_answer: None,
                zeta: None,
                action: Action::Keep,
                new_answer: None,
                status: Status::Unscored,
                strategy: None,
                fell_back: false,
                response_text: None,
            });
            continue;
        };
        let score = polar_score(params, inst, answer)?;
        let action = decide(policy, &score);
        let mut record = CorrectionRecord {
            id: inst.id.clone(),
            old_answer: Some(answer),
            zeta: Some(score.zeta),
            action,
            new_answer: Some(answer),
            status: Status::Kept,
            strategy: None,
            fell_back: false,
            response_text: None,
        };
        if action == Action::FollowUp {
            let followup = build_followup(policy, bundle, data.class_space(), inst, row);
            record.strategy = Some(followup.strategy);
            record.fell_back = followup.fell_back;
            jobs.push((records.len(), build_request(bundle, data.class_space(), inst, row, &followup)));
        }
        records.push(record);
    }

    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(client.concurrency().max(1)).build().map_err(|e| Error::Client(e.to_string()))?;
    let replies: Vec<Result<String>> = pool.install(|| jobs.par_iter().map(|(_, req)| client.complete(req)).collect());

    for ((slot, _), reply) in jobs.iter().zip(replies) {
        let record = &mut records[*slot];
        match reply {
            Ok(text) => {
                record.status = match mapper.map_response(&text) {
                    Mapped::Class(c) => {
                        record.new_answer = Some(c);
                        Status::Updated
                    }
                    Mapped::Unsure => Status::UnsureReply,
                    Mapped::Unmapped => Status::Unmapped,
                };
                record.response_text = Some(text);
            }
            Err(Error::Client(msg)) => {
                log::warn!("follow-up for {:?} failed: {msg}", record.id);
                record.status = Status::Failed;
            }
            Err(other) => return Err(other),
        }
    }
    Ok(records)
}

pub fn save_corrections(records: &[CorrectionRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
