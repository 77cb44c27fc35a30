//! LLM backends: a deterministic seeded mock and an HTTP client for
//! OpenAI-compatible completion and embedding endpoints.

mod http;
mod mock;

pub use http::HttpBackend;
pub use mock::MockBackend;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("text to embed is empty")]
    EmptyText,
    #[error("HTTP {status} after {attempts} attempt(s): {message}")]
    Http { status: u16, message: String, attempts: u32 },
    #[error("request failed after {attempts} attempt(s): {message}")]
    Network { message: String, attempts: u32 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("could not resolve {0:?} to one of the allowed labels")]
    UnresolvableLabel(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding is zero or non-finite")]
    DegenerateEmbedding,
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// When set, the answer must be exactly one of these single-token labels.
    #[serde(default)]
    pub constrained_labels: Option<Vec<String>>,
    #[serde(default)]
    pub stop_sequences: Option<Vec<String>>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), max_tokens: 64, temperature: 0.0, constrained_labels: None, stop_sequences: None }
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn constrained(mut self, labels: &[String]) -> Self {
        self.constrained_labels = Some(labels.to_vec());
        self.max_tokens = 1;
        self
    }

    pub fn stop(mut self, stops: &[String]) -> Self {
        self.stop_sequences = Some(stops.to_vec());
        self
    }

    fn check(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        if let Some(labels) = &self.constrained_labels {
            if labels.is_empty() {
                return Err(BackendError::Config("constrained mode needs at least one label".into()));
            }
        }
        Ok(())
    }
}

/// Unit-norm sentence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes `values` to unit L2 norm.
    pub fn new(mut values: Vec<f64>) -> Result<Self, BackendError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(BackendError::DegenerateEmbedding);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity with an arbitrary (not necessarily unit) vector.
    pub fn cosine(&self, other: &[f64]) -> f64 {
        let dot: f64 = self.values.iter().zip(other).map(|(a, b)| a * b).sum();
        let norm = other.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            0.0
        } else {
            dot / norm
        }
    }
}

/// Connection settings for a remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendProfile {
    /// Base URL up to and including the API version, e.g. `https://api.openai.com/v1`.
    pub endpoint_url: String,
    pub model_name: String,
    pub embedding_model_name: String,
    #[serde(with = "secs")]
    pub request_timeout: Duration,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub parallelism_cap: usize,
    pub embedding_dimension: usize,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Token id of each label under the remote tokenizer, enabling logit-bias
    /// constrained decoding. Without it labels are matched after generation.
    pub label_token_ids: std::collections::BTreeMap<String, u32>,
}

impl Default for BackendProfile {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-3.5-turbo-instruct".into(),
            embedding_model_name: "text-embedding-ada-002".into(),
            request_timeout: Duration::from_secs(60),
            max_retries: 5,
            retry_base_delay_ms: 500,
            parallelism_cap: 8,
            embedding_dimension: 1536,
            api_key_env: "OPENAI_API_KEY".into(),
            label_token_ids: Default::default(),
        }
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// A language model that can complete prompts and embed text.
///
/// Implementations are shared read-only across threads.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;

    /// `n` independent samples for one request.
    fn complete_many(&self, req: &CompletionRequest, n: usize) -> Result<Vec<String>, BackendError> {
        (0..n).map(|_| self.complete(req)).collect()
    }

    fn embed(&self, text: &str) -> Result<Embedding, BackendError>;

    /// Number of requests issued so far.
    fn request_count(&self) -> u64;

    /// Most requests the backend wants in flight at once.
    fn parallelism_cap(&self) -> usize {
        1
    }
}

/// Label closest to the first word of `text`, by case-insensitive edit distance.
pub fn nearest_label(text: &str, labels: &[String]) -> Option<String> {
    let word = text.split_whitespace().next()?.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    if word.is_empty() {
        return None;
    }
    labels
        .iter()
        .enumerate()
        .min_by_key(|(i, l)| (strsim::levenshtein(&word, &l.to_lowercase()), *i))
        .map(|(_, l)| l.clone())
}

/// Counting semaphore capping concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    cap: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(cap: usize) -> Self {
        Self { cap: cap.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Blocks until a slot is free; the slot is released when the guard drops.
    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("limit lock");
        while *active >= self.cap {
            active = self.freed.wait(active).expect("limit lock");
        }
        *active += 1;
        InFlightGuard { limit: self }
    }
}

pub struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.limit.active.lock().expect("limit lock");
        *active -= 1;
        self.limit.freed.notify_one();
    }
}
