//! Optional chat-completion client used by the LLM report backend.
//!
//! Environment:
//! - `DMLM_LLM_ENDPOINT`: full URL of a chat-completions endpoint
//! - `DMLM_LLM_API_KEY`: bearer token (optional)
//! - `DMLM_LLM_MODEL`: model id sent in the request (default `gpt-4`)
//! - `DMLM_LLM_CACHE`: directory for the response cache (optional)

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "DMLM_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "DMLM_LLM_API_KEY";
pub const ENV_MODEL: &str = "DMLM_LLM_MODEL";
pub const ENV_CACHE: &str = "DMLM_LLM_CACHE";
pub const DEFAULT_MODEL: &str = "gpt-4";
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

/// A single-turn chat completion.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
    fn model_id(&self) -> &str;
}

pub struct HttpChatClient {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(REQUEST_TIMEOUT)
            .build()
            .map_err(|e| Error::Llm(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            http,
        })
    }

    /// Client configured from the environment, or `None` when no endpoint is set.
    pub fn from_env() -> Result<Option<Self>> {
        let Ok(endpoint) = std::env::var(ENV_ENDPOINT) else {
            return Ok(None);
        };
        if endpoint.trim().is_empty() {
            return Ok(None);
        }
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.to_string());
        Self::new(endpoint, std::env::var(ENV_API_KEY).ok(), model).map(Some)
    }
}

/// Request body for a single user turn.
pub fn request_body(model: &str, prompt: &str) -> serde_json::Value {
    json!({
        "model": model,
        "messages": [{ "role": "user", "content": prompt }],
    })
}

/// Extracts the first choice's message text from a response body.
pub fn response_text(body: &serde_json::Value) -> Result<String> {
    body.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Llm("response has no choices[0].message.content".into()))
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut req = self.http.post(&self.endpoint).json(&request_body(&self.model, prompt));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Llm(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Llm(format!("endpoint returned {status}")));
        }
        let body: serde_json::Value = resp.json().map_err(|e| Error::Llm(e.to_string()))?;
        response_text(&body)
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

/// On-disk response cache keyed by (model id, prompt hash).
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var(ENV_CACHE) {
            Ok(d) if !d.trim().is_empty() => Self::new(d).map(Some),
            _ => Ok(None),
        }
    }

    fn path(&self, model: &str, prompt: &str) -> PathBuf {
        let hash = hex::encode(Sha256::digest(prompt.as_bytes()));
        let model: String = model
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        self.dir.join(format!("{model}--{hash}.txt"))
    }

    pub fn get(&self, model: &str, prompt: &str) -> Option<String> {
        std::fs::read_to_string(self.path(model, prompt)).ok()
    }

    /// Stores a response with write-then-rename so concurrent writers never
    /// expose a partial file.
    pub fn put(&self, model: &str, prompt: &str, response: &str) -> Result<()> {
        crate::io::write_atomic(&self.path(model, prompt), response.as_bytes())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Client plus optional cache, with prefix validation and one retry.
pub struct LlmBackend {
    client: Box<dyn ChatClient>,
    cache: Option<ResponseCache>,
}

impl LlmBackend {
    pub fn new(client: Box<dyn ChatClient>, cache: Option<ResponseCache>) -> Self {
        Self { client, cache }
    }

    pub fn from_env() -> Result<Option<Self>> {
        Ok(match HttpChatClient::from_env()? {
            Some(c) => Some(Self::new(Box::new(c), ResponseCache::from_env()?)),
            None => None,
        })
    }

    /// Asks `prompt` and returns the answer body after `prefix`.
    pub fn ask_with_prefix(&self, prompt: &str, prefix: &str) -> Result<String> {
        let model = self.client.model_id().to_string();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&model, prompt)) {
            if let Some(body) = strip_answer(&hit, prefix) {
                return Ok(body);
            }
        }
        let mut last_err = None;
        for attempt in 0..2 {
            match self.client.complete(prompt) {
                Ok(text) => match strip_answer(&text, prefix) {
                    Some(body) => {
                        if let Some(cache) = &self.cache {
                            cache.put(&model, prompt, &text)?;
                        }
                        return Ok(body);
                    }
                    None => {
                        log::warn!("llm answer lacks `{prefix}` prefix (attempt {})", attempt + 1);
                        last_err = Some(Error::Llm(format!("answer does not start with `{prefix}`")));
                    }
                },
                Err(e) => {
                    log::warn!("llm request failed (attempt {}): {e}", attempt + 1);
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Llm("no attempt made".into())))
    }
}

/// Single-line answer body after `prefix`, or `None` if the prefix is missing
/// or nothing follows it.
fn strip_answer(text: &str, prefix: &str) -> Option<String> {
    let rest = text.trim_start().strip_prefix(prefix)?;
    let body = rest.split_whitespace().collect::<Vec<_>>().join(" ");
    (!body.is_empty()).then_some(body)
}
