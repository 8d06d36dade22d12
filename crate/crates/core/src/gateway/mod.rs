//! Client for OpenAI-compatible chat-completion and embedding endpoints.
//!
//! Everything that talks to a model goes through [`ChatBackend`] or
//! [`Embedder`]; [`Gateway`] is the HTTP implementation and
//! [`ScriptedBackend`] an in-memory one for offline runs.

mod client;
#[cfg(any(test, feature = "mock-server"))]
pub mod mock;

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::Gateway;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication rejected ({0})")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request too large: {0}")]
    Oversize(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("unexpected response: {0}")]
    Schema(String),
    #[error("empty input")]
    EmptyInput,
    #[error("all {0} calls failed")]
    AllFailed(usize),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    /// Worth another attempt.
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::RateLimited { .. } | GatewayError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<PathBuf>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, text: text.into(), images: Vec::new() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, text: text.into(), images: Vec::new() }
    }

    pub fn with_images(mut self, images: impl IntoIterator<Item = PathBuf>) -> Self {
        self.images.extend(images);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub name: String,
    pub base_url: String,
    /// Environment variable holding the API key. Defaults to
    /// `WFR_API_KEY_{NAME}`.
    pub api_key_env: Option<String>,
    pub model: String,
    pub embedding_model: Option<String>,
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
    pub retry_budget: u32,
    pub backoff_base_ms: u64,
    pub timeout_secs: u64,
    pub max_images: Option<usize>,
    pub journal: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            name: "default".into(),
            base_url: "http://localhost:8000/v1".into(),
            api_key_env: None,
            model: "default".into(),
            embedding_model: None,
            temperature: 0.3,
            top_k: 50,
            top_p: 1.0,
            max_tokens: 400,
            parallelism: 4,
            retry_budget: 3,
            backoff_base_ms: 500,
            timeout_secs: 120,
            max_images: None,
            journal: None,
        }
    }
}

impl BackendConfig {
    /// Settings used when drawing candidate reports for augmentation.
    pub fn for_sampling(mut self) -> Self {
        self.temperature = 0.9;
        self.top_k = 50;
        self.top_p = 0.9;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::Config(format!("temperature {} < 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.parallelism == 0 {
            return Err(GatewayError::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn api_key_var(&self) -> String {
        self.api_key_env.clone().unwrap_or_else(|| {
            let name: String =
                self.name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
            format!("WFR_API_KEY_{name}")
        })
    }
}

/// A chat request; `seed` is forwarded to backends that honour it.
#[derive(Debug, Clone, Default)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub seed: Option<u64>,
}

pub trait ChatBackend: Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError>;

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        self.complete(&ChatRequest { messages: messages.to_vec(), seed: None })
    }

    /// Upper bound on concurrent calls this backend accepts.
    fn parallelism(&self) -> usize {
        1
    }
}

pub trait Embedder: Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

impl<F> Embedder for F
where
    F: Fn(&str) -> Vec<f64> + Sync,
{
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        Ok(texts.iter().map(|t| self(t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Leave seeding to the backend.
    Unseeded,
    /// Call `i` uses `base + i`.
    Sequential(u64),
}

impl SeedPolicy {
    fn seed_for(self, i: usize) -> Option<u64> {
        match self {
            SeedPolicy::Unseeded => None,
            SeedPolicy::Sequential(base) => Some(base.wrapping_add(i as u64)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CallRecord {
    pub index: usize,
    pub seed: Option<u64>,
    pub duration_ms: u128,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleBatch {
    /// Successful completions, in call-index order.
    pub texts: Vec<String>,
    pub calls: Vec<CallRecord>,
}

impl SampleBatch {
    pub fn failures(&self) -> impl Iterator<Item = &CallRecord> {
        self.calls.iter().filter(|c| c.error.is_some())
    }
}

/// Draws `n` independent completions, running up to the backend's
/// parallelism at once. Partial failures are reported in the call manifest;
/// only a batch with no success at all is an error.
pub fn sample_n<B: ChatBackend + ?Sized>(
    backend: &B,
    messages: &[ChatMessage],
    n: usize,
    seeds: SeedPolicy,
) -> Result<SampleBatch, GatewayError> {
    if n == 0 {
        return Err(GatewayError::EmptyInput);
    }
    let workers = backend.parallelism().clamp(1, n);
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<(Result<String, GatewayError>, CallRecord)>>> =
        Mutex::new((0..n).map(|_| None).collect());

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut g = next.lock().unwrap();
                    if *g >= n {
                        break;
                    }
                    *g += 1;
                    *g - 1
                };
                let seed = seeds.seed_for(i);
                let started = Instant::now();
                let out = backend.complete(&ChatRequest { messages: messages.to_vec(), seed });
                let rec = CallRecord {
                    index: i,
                    seed,
                    duration_ms: started.elapsed().as_millis(),
                    error: out.as_ref().err().map(|e| e.to_string()),
                };
                results.lock().unwrap()[i] = Some((out, rec));
            });
        }
    });

    let mut texts = Vec::new();
    let mut calls = Vec::with_capacity(n);
    for slot in results.into_inner().unwrap() {
        let (out, rec) = slot.expect("every index visited");
        if let Ok(t) = out {
            texts.push(t);
        }
        calls.push(rec);
    }
    if texts.is_empty() {
        return Err(GatewayError::AllFailed(n));
    }
    Ok(SampleBatch { texts, calls })
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub(crate) struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    pub(crate) fn new(n: usize) -> Self {
        Slots { free: Mutex::new(n), cv: Condvar::new() }
    }

    pub(crate) fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

pub(crate) struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Replies from a fixed script; handy for offline pipelines and tests.
pub struct ScriptedBackend {
    replies: Mutex<std::collections::VecDeque<Result<String, GatewayError>>>,
    fallback: Option<Box<dyn Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync>>,
    pub requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(replies: impl IntoIterator<Item = Result<String, GatewayError>>) -> Self {
        ScriptedBackend { replies: Mutex::new(replies.into_iter().collect()), fallback: None, requests: Mutex::new(Vec::new()) }
    }

    pub fn always(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::from_fn(move |_| Ok(reply.clone()))
    }

    pub fn from_fn(f: impl Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static) -> Self {
        ScriptedBackend { replies: Mutex::new(Default::default()), fallback: Some(Box::new(f)), requests: Mutex::new(Vec::new()) }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.requests.lock().unwrap().push(req.clone());
        if let Some(r) = self.replies.lock().unwrap().pop_front() {
            return r;
        }
        match &self.fallback {
            Some(f) => f(req),
            None => Err(GatewayError::Transport("script exhausted".into())),
        }
    }
}
