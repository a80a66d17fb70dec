//! Chat-completion clients: HTTP, on-disk response replay, and call counting.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::prompts::Step;
use crate::error::{Error, Result};
use crate::rng;

pub const ENV_URL: &str = "SEMPT_LLM_URL";
pub const ENV_KEY: &str = "SEMPT_LLM_KEY";
pub const ENV_MODEL: &str = "SEMPT_LLM_MODEL";

pub const STEP1_TEMPERATURE: f32 = 0.2;
pub const STEP2_TEMPERATURE: f32 = 0.7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// What a request is asking for. Not sent over the wire; offline clients
/// use it to answer without parsing prompt text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Purpose {
    Attributes { categories: Vec<String>, count: usize },
    Descriptions { category: String, attributes: Vec<String>, count: usize },
}

impl Purpose {
    pub fn step(&self) -> Step {
        match self {
            Purpose::Attributes { .. } => Step::Attributes,
            Purpose::Descriptions { .. } => Step::Descriptions,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub attempt: usize,
    pub purpose: Purpose,
}

impl ChatRequest {
    /// Stable digest of everything that reaches the wire.
    pub fn digest(&self, model: &str) -> String {
        let body = serde_json::json!({
            "model": model,
            "messages": self.messages,
            "temperature": self.temperature,
        });
        rng::hex_digest(body.to_string().as_bytes())
    }
}

pub trait LlmClient: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// OpenAI-style `/chat/completions` endpoint.
pub struct HttpClient {
    url: String,
    key: Option<String>,
    model: String,
    retries: usize,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, key: Option<String>, model: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            url: url.into(),
            key,
            model: model.into(),
            retries: 3,
            agent,
        }
    }

    /// Reads `SEMPT_LLM_URL`, `SEMPT_LLM_KEY` and `SEMPT_LLM_MODEL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| Error::Config(format!("{ENV_URL} is not set; use --stub for offline generation")))?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into());
        Ok(Self::new(url, std::env::var(ENV_KEY).ok(), model))
    }

    fn send_once(&self, request: &ChatRequest) -> std::result::Result<String, String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("response has no choices[0].message.content: {value}"))
    }
}

impl LlmClient for HttpClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..self.retries {
            match self.send_once(request) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("LLM request failed (attempt {}): {e}", attempt + 1);
                    last = e;
                    thread::sleep(Duration::from_millis(500 << attempt));
                }
            }
        }
        Err(Error::Transport(format!(
            "{} failed after {} attempts: {last}",
            self.url, self.retries
        )))
    }
}

/// Replays stored responses keyed by request digest; forwards misses to the
/// inner client and persists them immediately.
pub struct CachingClient<C> {
    inner: C,
    path: Option<PathBuf>,
    entries: Mutex<IndexMap<String, String>>,
    forwarded: AtomicUsize,
}

impl<C: LlmClient> CachingClient<C> {
    pub fn in_memory(inner: C) -> Self {
        Self {
            inner,
            path: None,
            entries: Mutex::new(IndexMap::new()),
            forwarded: AtomicUsize::new(0),
        }
    }

    pub fn open(inner: C, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let entries = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text)?
        } else {
            IndexMap::new()
        };
        Ok(Self {
            inner,
            path: Some(path),
            entries: Mutex::new(entries),
            forwarded: AtomicUsize::new(0),
        })
    }

    /// Requests that missed the cache and reached the inner client.
    pub fn forwarded_calls(&self) -> usize {
        self.forwarded.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> C {
        self.inner
    }

    fn persist(&self, entries: &IndexMap<String, String>) -> Result<()> {
        if let Some(path) = &self.path {
            let text = serde_json::to_string_pretty(entries)?;
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

impl<C: LlmClient> LlmClient for CachingClient<C> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let key = request.digest(self.inner.model_id());
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        self.forwarded.fetch_add(1, Ordering::Relaxed);
        let text = self.inner.complete(request)?;
        let mut entries = self.entries.lock().expect("cache lock");
        entries.insert(key, text.clone());
        self.persist(&entries)?;
        Ok(text)
    }
}

/// Counts calls; wraps any client.
pub struct CountingClient<C> {
    inner: C,
    calls: AtomicUsize,
}

impl<C: LlmClient> CountingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<C: LlmClient> LlmClient for CountingClient<C> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(request)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for &C {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}
