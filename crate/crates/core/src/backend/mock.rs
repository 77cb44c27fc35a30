use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Backend, BackendError, CompletionRequest, Embedding};
use crate::hash::{seeded_rng, stable_hash};

const DEFAULT_DIMENSION: usize = 1536;
const MAX_GENERATED_WORDS: u32 = 16;

/// Deterministic offline backend: every output is a pure function of the
/// request, the sample index and the seed.
///
/// Completions come from the first rule whose pattern occurs in the prompt.
/// Without a matching rule, constrained requests return the label mentioned
/// most often in the prompt (ties broken by hash), and free-form requests
/// return a hash-seeded selection of the prompt's own words. Embeddings are
/// hash-seeded Gaussian vectors projected to the unit sphere.
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    dimension: usize,
    rules: Vec<(String, Vec<String>)>,
    requests: AtomicU64,
    parallelism: usize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed, dimension: DEFAULT_DIMENSION, rules: Vec::new(), requests: AtomicU64::new(0), parallelism: 4 }
    }

    pub fn with_dimension(mut self, dimension: usize) -> Self {
        self.dimension = dimension.max(1);
        self
    }

    pub fn with_parallelism(mut self, cap: usize) -> Self {
        self.parallelism = cap.max(1);
        self
    }

    /// Answers prompts containing `pattern` with `response`.
    pub fn with_rule(self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.with_rule_responses(pattern, vec![response.into()])
    }

    /// Like [`with_rule`](Self::with_rule); sample `i` of a request gets `responses[i % len]`.
    pub fn with_rule_responses(mut self, pattern: impl Into<String>, responses: Vec<String>) -> Self {
        assert!(!responses.is_empty(), "a rule needs at least one response");
        self.rules.push((pattern.into(), responses));
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn request_hash(&self, req: &CompletionRequest, index: usize) -> u64 {
        let labels = req.constrained_labels.as_ref().map(|l| l.join("\u{1f}")).unwrap_or_default();
        stable_hash(&[
            &self.seed.to_le_bytes(),
            b"complete",
            req.prompt.as_bytes(),
            &req.max_tokens.to_le_bytes(),
            &req.temperature.to_bits().to_le_bytes(),
            labels.as_bytes(),
            &(index as u64).to_le_bytes(),
        ])
    }

    fn rule_for(&self, prompt: &str, index: usize) -> Option<&str> {
        self.rules
            .iter()
            .find(|(pattern, _)| prompt.contains(pattern.as_str()))
            .map(|(_, responses)| responses[index % responses.len()].as_str())
    }

    fn sample(&self, req: &CompletionRequest, index: usize) -> Result<String, BackendError> {
        req.check()?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        let h = self.request_hash(req, index);
        let rule = self.rule_for(&req.prompt, index);
        if let Some(labels) = &req.constrained_labels {
            if let Some(r) = rule.filter(|r| labels.iter().any(|l| l == r)) {
                return Ok(r.to_string());
            }
            let mentions =
                |label: &str| req.prompt.split(|c: char| !c.is_alphanumeric()).filter(|w| *w == label).count();
            let counts: Vec<usize> = labels.iter().map(|l| mentions(l)).collect();
            let best = counts.iter().copied().max().unwrap_or(0);
            let tied: Vec<usize> = (0..labels.len()).filter(|&i| counts[i] == best).collect();
            return Ok(labels[tied[(h % tied.len() as u64) as usize]].clone());
        }
        if let Some(r) = rule {
            return Ok(r.to_string());
        }
        let words: Vec<&str> = req.prompt.split_whitespace().collect();
        let mut rng = seeded_rng(&[&h.to_le_bytes()]);
        let n = req.max_tokens.clamp(1, MAX_GENERATED_WORDS) as usize;
        Ok((0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" "))
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        self.sample(req, 0)
    }

    fn complete_many(&self, req: &CompletionRequest, n: usize) -> Result<Vec<String>, BackendError> {
        (0..n).map(|i| self.sample(req, i)).collect()
    }

    fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut rng = seeded_rng(&[&self.seed.to_le_bytes(), b"embed", text.as_bytes()]);
        let values: Vec<f64> = (0..self.dimension).map(|_| rng.sample(StandardNormal)).collect();
        Embedding::new(values)
    }

    fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn parallelism_cap(&self) -> usize {
        self.parallelism
    }
}
