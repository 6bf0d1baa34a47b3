//! Completion sources: an OpenAI-style chat-completion client and a
//! scripted fixture, plus order-preserving batch execution.

use std::future::Future;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use rotbench_core::augment::{dedup_queries, DEDUP_THRESHOLD};
use rotbench_core::prompt::{build_prompt, build_query_expansion_prompt, parse_generated_queries, ChatMessage};
use rotbench_core::{PerturbedCase, Tool};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::format::Script;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Base URL of the chat-completion service; `/chat/completions` is
    /// appended unless already present.
    pub endpoint: Option<String>,
    pub model_name: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub concurrency_limit: usize,
    pub temperature: f64,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    /// Delay before the first retry; doubles on each further attempt.
    pub initial_backoff: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: String::new(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            concurrency_limit: 4,
            temperature: 0.0,
            api_key_env: "ROTBENCH_API_KEY".into(),
            initial_backoff: Duration::from_millis(500),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidConfig(m.into()));
        if self.timeout.is_zero() {
            return bad("timeout must be positive");
        }
        if self.concurrency_limit == 0 {
            return bad("concurrency limit must be at least 1");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a non-negative number");
        }
        if self.kind == BackendKind::Http && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return bad("the http backend needs an endpoint");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("case `{0}`: no scripted answer")]
    MissingScript(String),
    #[error("case `{case_id}`: request failed after {attempts} attempt(s): {message}")]
    Request {
        case_id: String,
        attempts: u32,
        message: String,
    },
    #[error("case `{case_id}`: malformed response: {message}")]
    BadResponse { case_id: String, message: String },
}

/// Something that turns a prompt into model text.
pub trait Completion: Send + Sync {
    fn complete(
        &self,
        case_id: &str,
        messages: &[ChatMessage],
    ) -> impl Future<Output = Result<String, BackendError>> + Send;
}

/// Replays fixed answers keyed by case id.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    answers: Script,
}

impl ScriptedBackend {
    pub fn new(answers: Script) -> Self {
        Self { answers }
    }
}

impl Completion for ScriptedBackend {
    async fn complete(&self, case_id: &str, _messages: &[ChatMessage]) -> Result<String, BackendError> {
        self.answers
            .get(case_id)
            .cloned()
            .ok_or_else(|| BackendError::MissingScript(case_id.into()))
    }
}

pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
    max_retries: u32,
    initial_backoff: Duration,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpBackend {
    /// The API key, if any, is read from the environment here and kept only
    /// in memory.
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: &BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        config.validate()?;
        let base = config.endpoint.as_deref().unwrap_or_default().trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            client,
            url,
            model: config.model_name.clone(),
            temperature: config.temperature,
            api_key,
            max_retries: config.max_retries,
            initial_backoff: config.initial_backoff,
        })
    }

    async fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("HTTP {status}: {}", snippet(&text))));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| Attempt::Fatal(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal("no choices[0].message.content".into()))
    }
}

fn snippet(text: &str) -> &str {
    let end = text.char_indices().nth(200).map_or(text.len(), |(i, _)| i);
    &text[..end]
}

impl Completion for HttpBackend {
    async fn complete(&self, case_id: &str, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
        });
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body).await {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(message)) => {
                    return Err(BackendError::BadResponse {
                        case_id: case_id.into(),
                        message,
                    })
                }
                Err(Attempt::Retry(message)) if attempts > self.max_retries => {
                    return Err(BackendError::Request {
                        case_id: case_id.into(),
                        attempts,
                        message,
                    })
                }
                Err(Attempt::Retry(_)) => {
                    tokio::time::sleep(self.initial_backoff * 2u32.saturating_pow(attempts - 1)).await;
                }
            }
        }
    }
}

/// Either completion source, chosen at run time from a config.
pub enum Backend {
    Http(HttpBackend),
    Scripted(ScriptedBackend),
}

impl Backend {
    pub fn from_config(config: &BackendConfig, script: Option<Script>) -> Result<Self, BackendError> {
        config.validate()?;
        match config.kind {
            BackendKind::Http => Ok(Backend::Http(HttpBackend::new(config)?)),
            BackendKind::Scripted => Ok(Backend::Scripted(ScriptedBackend::new(
                script.ok_or_else(|| BackendError::InvalidConfig("the scripted backend needs a script file".into()))?,
            ))),
        }
    }
}

impl Completion for Backend {
    async fn complete(&self, case_id: &str, messages: &[ChatMessage]) -> Result<String, BackendError> {
        match self {
            Backend::Http(b) => b.complete(case_id, messages).await,
            Backend::Scripted(b) => b.complete(case_id, messages).await,
        }
    }
}

pub type BatchResult = (String, Result<String, BackendError>);

/// Run every case with at most `limit` requests in flight. `sink` sees each
/// result in input order as soon as it and all earlier ones are done.
pub async fn run_batch_with<B, F>(backend: &B, cases: &[&PerturbedCase], limit: usize, mut sink: F) -> Vec<BatchResult>
where
    B: Completion,
    F: FnMut(&BatchResult),
{
    let mut results = stream::iter(cases)
        .map(|case| async move {
            let messages = build_prompt(case);
            (case.id.clone(), backend.complete(&case.id, &messages).await)
        })
        .buffered(limit.max(1));
    let mut out = Vec::with_capacity(cases.len());
    while let Some(r) = results.next().await {
        sink(&r);
        out.push(r);
    }
    out
}

pub async fn run_batch<B: Completion>(backend: &B, cases: &[&PerturbedCase], limit: usize) -> Vec<BatchResult> {
    run_batch_with(backend, cases, limit, |_| {}).await
}

/// Ask a generator model for `count` new queries over `tools`, then drop
/// near-duplicates of `pool` and of each other.
pub async fn expand_queries<B: Completion>(
    backend: &B,
    request_id: &str,
    tools: &[Tool],
    examples: &[String],
    count: usize,
    pool: &[String],
) -> Result<Vec<String>, BackendError> {
    let messages = build_query_expansion_prompt(tools, examples, count);
    let text = backend.complete(request_id, &messages).await?;
    Ok(dedup_queries(&parse_generated_queries(&text), pool, DEDUP_THRESHOLD))
}
