//! LLM clients: an offline replay client and an HTTP client for
//! chat-completions endpoints.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Strategy;
use crate::error::{Error, Result};

pub const TOKEN_ENV: &str = "POLAR_LLM_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub id: String,
    pub strategy: Strategy,
    pub messages: Vec<Message>,
}

pub trait LlmClient: Sync {
    /// The reply text. Transport failures surface as [`Error::Client`].
    fn complete(&self, request: &ChatRequest) -> Result<String>;

    /// Maximum number of requests in flight.
    fn concurrency(&self) -> usize {
        1
    }
}

#[derive(Debug, Deserialize)]
struct ReplayRecord {
    id: String,
    strategy: Strategy,
    response_text: String,
}

/// Answers from a fixture keyed by `(id, strategy)`; never touches the network.
#[derive(Debug, Default)]
pub struct ReplayClient {
    responses: HashMap<(String, Strategy), String>,
    calls: Mutex<Vec<(String, Strategy)>>,
}

impl ReplayClient {
    pub fn new(responses: impl IntoIterator<Item = (String, Strategy, String)>) -> Self {
        Self { responses: responses.into_iter().map(|(id, s, text)| ((id, s), text)).collect(), calls: Mutex::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ReplayRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed(e.to_string()).at_line(i + 1))?;
            records.push((r.id, r.strategy, r.response_text));
        }
        Ok(Self::new(records))
    }

    /// Every `(id, strategy)` requested so far, in call order.
    pub fn calls(&self) -> Vec<(String, Strategy)> {
        self.calls.lock().expect("call log poisoned").clone()
    }
}

impl LlmClient for ReplayClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls.lock().expect("call log poisoned").push((request.id.clone(), request.strategy));
        self.responses
            .get(&(request.id.clone(), request.strategy))
            .cloned()
            .ok_or_else(|| Error::MissingReplay { id: request.id.clone(), strategy: request.strategy.to_string() })
    }

    fn concurrency(&self) -> usize {
        4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "defaults::timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "defaults::concurrency")]
    pub concurrency: usize,
}

mod defaults {
    pub fn timeout_secs() -> u64 {
        60
    }
    pub fn max_retries() -> u32 {
        3
    }
    pub fn backoff_ms() -> u64 {
        500
    }
    pub fn concurrency() -> usize {
        4
    }
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout_secs: defaults::timeout_secs(),
            max_retries: defaults::max_retries(),
            backoff_ms: defaults::backoff_ms(),
            concurrency: defaults::concurrency(),
        }
    }
}

pub struct HttpClient {
    cfg: HttpConfig,
    url: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    /// Reads the bearer token from `POLAR_LLM_TOKEN`; without it requests carry no
    /// authorization header.
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            log::warn!("{TOKEN_ENV} is not set; sending unauthenticated requests");
        }
        Self::with_token(cfg, token)
    }

    pub fn with_token(cfg: HttpConfig, token: Option<String>) -> Result<Self> {
        if cfg.concurrency == 0 {
            return Err(Error::InvalidConfig("concurrency must be positive".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        let url = format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/'));
        Ok(Self { cfg, url, token, http })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.http.post(&self.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((retry, format!("status {status}")));
        }
        let value: Value = resp.json().map_err(|e| (false, format!("invalid response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| (false, "response has no choices[0].message.content".to_string()))
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "messages": request.messages,
            "temperature": 0,
        });
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((retry, msg)) if retry && attempt < self.cfg.max_retries => {
                    let wait = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::debug!("request for {:?} failed ({msg}); retrying in {wait} ms", request.id);
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err((_, msg)) => return Err(Error::Client(format!("{}: {msg}", request.id))),
            }
        }
    }

    fn concurrency(&self) -> usize {
        self.cfg.concurrency
    }
}
