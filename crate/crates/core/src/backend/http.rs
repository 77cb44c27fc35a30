use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{nearest_label, Backend, BackendError, BackendProfile, CompletionRequest, Embedding, InFlightLimit};

/// Tokens requested when labels are matched after free generation.
const UNCONSTRAINED_LABEL_TOKENS: u32 = 3;
const LOGIT_BIAS: f64 = 100.0;

/// Client for OpenAI-compatible `/completions` and `/embeddings` endpoints.
///
/// Network errors, 429 and 5xx responses are retried with jittered
/// exponential backoff; anything else fails immediately.
pub struct HttpBackend {
    profile: BackendProfile,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    limit: InFlightLimit,
    requests: AtomicU64,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.profile.endpoint_url)
            .field("model", &self.profile.model_name)
            .field("has_key", &self.api_key.is_some())
            .finish()
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    index: usize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpBackend {
    /// Reads the API key from the profile's environment variable; a missing
    /// key sends unauthenticated requests.
    pub fn new(profile: BackendProfile) -> Result<Self, BackendError> {
        let api_key = std::env::var(&profile.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending requests without authorization", profile.api_key_env);
        }
        Self::with_key(profile, api_key)
    }

    pub fn with_key(profile: BackendProfile, api_key: Option<String>) -> Result<Self, BackendError> {
        if profile.endpoint_url.trim().is_empty() {
            return Err(BackendError::Config("endpoint_url is empty".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(profile.request_timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let limit = InFlightLimit::new(profile.parallelism_cap);
        Ok(Self { profile, client, api_key, limit, requests: AtomicU64::new(0) })
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.profile.endpoint_url.trim_end_matches('/'), path)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.profile.retry_base_delay_ms.saturating_mul(1 << attempt.min(16));
        let jitter = rand::rng().random_range(0..=base / 2 + 1);
        Duration::from_millis(base + jitter)
    }

    /// POSTs `body` and returns the decoded JSON of the first 2xx answer.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.url(path);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let outcome = {
                let _slot = self.limit.acquire();
                self.requests.fetch_add(1, Ordering::Relaxed);
                let mut rb = self.client.post(&url).json(body);
                if let Some(key) = &self.api_key {
                    rb = rb.bearer_auth(key);
                }
                rb.send()
            };
            let retryable = match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp.text().map_err(|e| BackendError::Malformed(e.to_string()))?;
                        return serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()));
                    }
                    let message = resp.text().unwrap_or_default();
                    let err = BackendError::Http { status: status.as_u16(), message, attempts: attempt };
                    if status.as_u16() != 429 && !status.is_server_error() {
                        return Err(err);
                    }
                    err
                }
                Err(e) => BackendError::Network { message: e.to_string(), attempts: attempt },
            };
            if attempt > self.profile.max_retries {
                return Err(retryable);
            }
            let wait = self.backoff(attempt - 1);
            log::debug!("retrying {path} in {wait:?} after: {retryable}");
            std::thread::sleep(wait);
        }
    }

    fn completion_body(&self, req: &CompletionRequest, n: usize) -> Value {
        let mut body = json!({
            "model": self.profile.model_name,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "n": n,
        });
        if let Some(stop) = &req.stop_sequences {
            body["stop"] = json!(stop);
        }
        if let Some(labels) = &req.constrained_labels {
            match self.label_bias(labels) {
                Some(bias) => {
                    body["logit_bias"] = json!(bias);
                    body["max_tokens"] = json!(1);
                }
                None => body["max_tokens"] = json!(UNCONSTRAINED_LABEL_TOKENS),
            }
        }
        body
    }

    /// Logit bias forcing the labels, if every label has a known token id.
    fn label_bias(&self, labels: &[String]) -> Option<BTreeMap<String, f64>> {
        labels.iter().map(|l| self.profile.label_token_ids.get(l).map(|id| (id.to_string(), LOGIT_BIAS))).collect()
    }

    fn resolve(req: &CompletionRequest, text: String) -> Result<String, BackendError> {
        match &req.constrained_labels {
            None => Ok(text),
            Some(labels) => {
                let trimmed = text.trim();
                if let Some(l) = labels.iter().find(|l| l.as_str() == trimmed) {
                    return Ok(l.clone());
                }
                nearest_label(trimmed, labels).ok_or(BackendError::UnresolvableLabel(text))
            }
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        self.complete_many(req, 1)?.pop().ok_or_else(|| BackendError::Malformed("no choices".into()))
    }

    fn complete_many(&self, req: &CompletionRequest, n: usize) -> Result<Vec<String>, BackendError> {
        req.check()?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let raw = self.post("completions", &self.completion_body(req, n))?;
        let mut parsed: CompletionResponse =
            serde_json::from_value(raw).map_err(|e| BackendError::Malformed(e.to_string()))?;
        if parsed.choices.len() != n {
            return Err(BackendError::Malformed(format!("expected {n} choices, got {}", parsed.choices.len())));
        }
        parsed.choices.sort_by_key(|c| c.index);
        parsed.choices.into_iter().map(|c| Self::resolve(req, c.text)).collect()
    }

    fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let body = json!({ "model": self.profile.embedding_model_name, "input": text });
        let raw = self.post("embeddings", &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_value(raw).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let values = parsed.data.into_iter().next().ok_or_else(|| BackendError::Malformed("no data".into()))?.embedding;
        if values.len() != self.profile.embedding_dimension {
            return Err(BackendError::DimensionMismatch {
                expected: self.profile.embedding_dimension,
                got: values.len(),
            });
        }
        Embedding::new(values)
    }

    fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn parallelism_cap(&self) -> usize {
        self.limit.cap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(ids: &[(&str, u32)]) -> HttpBackend {
        let p = BackendProfile {
            label_token_ids: ids.iter().map(|(l, i)| (l.to_string(), *i)).collect(),
            ..BackendProfile::default()
        };
        HttpBackend::with_key(p, None).unwrap()
    }

    #[test]
    fn bias_only_when_every_label_has_a_token() {
        let labels = vec!["Positive".to_string(), "Negative".to_string()];
        let req = CompletionRequest::new("x").constrained(&labels);
        let full = backend(&[("Positive", 11), ("Negative", 22)]).completion_body(&req, 1);
        assert_eq!(full["logit_bias"]["11"], json!(100.0));
        assert_eq!(full["max_tokens"], json!(1));
        let partial = backend(&[("Positive", 11)]).completion_body(&req, 1);
        assert!(partial.get("logit_bias").is_none());
        assert_eq!(partial["max_tokens"], json!(UNCONSTRAINED_LABEL_TOKENS));
    }

    #[test]
    fn resolves_free_text_to_labels() {
        let labels = vec!["Positive".to_string(), "Negative".to_string()];
        let req = CompletionRequest::new("x").constrained(&labels);
        assert_eq!(HttpBackend::resolve(&req, " Negative".into()).unwrap(), "Negative");
        assert_eq!(HttpBackend::resolve(&req, "positive!".into()).unwrap(), "Positive");
        assert!(HttpBackend::resolve(&req, "  ".into()).is_err());
    }

    #[test]
    fn url_joins_cleanly() {
        let p = BackendProfile { endpoint_url: "http://localhost:1/v1/".into(), ..BackendProfile::default() };
        assert_eq!(HttpBackend::with_key(p, None).unwrap().url("completions"), "http://localhost:1/v1/completions");
    }
}
