use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{commit, fan_out, member_completions, AggregationError, Partition, PromptTemplate, Release, RunContext};
use crate::accounting::{LedgerEntry, Mechanism, PrivacyLedger};
use crate::backend::{BackendError, CompletionRequest, Embedding};
use crate::mechanisms::gaussian_vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsaTask {
    pub template: PromptTemplate,
    /// Noise multiplier: the noise standard deviation is `sigma * sensitivity`.
    pub sigma: f64,
    /// L2 sensitivity of the mean embedding. The default is `sqrt(2)`; a
    /// replaced member moves a mean over `n_subsets` unit vectors by at most
    /// `2 / n_subsets`, which may be passed for less noise.
    pub sensitivity: f64,
    pub n_candidates: usize,
    pub candidate_temperature: f64,
    pub member_temperature: f64,
    pub max_tokens: u32,
}

impl Default for EsaTask {
    fn default() -> Self {
        Self {
            template: PromptTemplate::dialogue_summary(),
            sigma: 1.0,
            sensitivity: std::f64::consts::SQRT_2,
            n_candidates: 20,
            candidate_temperature: 1.0,
            member_temperature: 0.0,
            max_tokens: 64,
        }
    }
}

impl EsaTask {
    pub fn ledger_entries(&self, q: f64) -> Vec<LedgerEntry> {
        vec![LedgerEntry::new(Mechanism::Gaussian { sigma: self.sigma }, q, 1)]
    }
}

/// Index of the candidate with the largest cosine similarity to `target`;
/// ties go to the lowest index. `None` when there are no candidates.
pub fn select_candidate(target: &[f64], candidates: &[Embedding]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = c.cosine(target);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

fn embed_all(ctx: &RunContext<'_>, texts: &[String]) -> Vec<Result<Embedding, BackendError>> {
    fan_out(texts, ctx.backend.parallelism_cap(), |t| ctx.backend.embed(t))
}

/// Releases the public zero-shot candidate closest to the noisy mean of the
/// ensemble's output embeddings. Candidates see only the query.
pub fn esa_generate<R: Rng + ?Sized>(
    ctx: &RunContext<'_>,
    query: &str,
    partition: &Partition,
    task: &EsaTask,
    ledger: &mut PrivacyLedger,
    rng: &mut R,
) -> Result<Release, AggregationError> {
    if task.n_candidates == 0 {
        return Err(AggregationError::Config("ESA needs at least one candidate".into()));
    }
    if !(task.sigma >= 0.0 && task.sigma.is_finite()) {
        return Err(AggregationError::Config(format!("sigma = {} must be finite and >= 0", task.sigma)));
    }

    let prompts: Vec<String> =
        (0..partition.len()).map(|i| task.template.render(&partition.exemplars(i), query)).collect();
    let outputs: Vec<String> = member_completions(ctx, &prompts, |p| {
        CompletionRequest::new(p).max_tokens(task.max_tokens).temperature(task.member_temperature)
    })
    .into_iter()
    .flatten()
    .filter(|t| !t.trim().is_empty())
    .collect();
    let members: Vec<Embedding> = embed_all(ctx, &outputs)
        .into_iter()
        .filter_map(|r| r.map_err(|e| log::warn!("ensemble member dropped: {e}")).ok())
        .collect();
    if !partition.is_empty() && members.is_empty() {
        return Err(AggregationError::AllSubsetsFailed(partition.len()));
    }

    let zero_shot = CompletionRequest::new(task.template.render(&[], query))
        .max_tokens(task.max_tokens)
        .temperature(task.candidate_temperature);
    let texts = ctx.backend.complete_many(&zero_shot, task.n_candidates)?;
    let embedded = embed_all(ctx, &texts);
    let mut candidates = Vec::new();
    let mut cand_embs = Vec::new();
    for (t, e) in texts.into_iter().zip(embedded) {
        match e {
            Ok(e) => {
                candidates.push(t);
                cand_embs.push(e);
            }
            Err(err) => log::warn!("candidate dropped: {err}"),
        }
    }
    if candidates.is_empty() {
        return Err(AggregationError::Input("no zero-shot candidate could be embedded".into()));
    }

    let dim = cand_embs[0].dimension();
    if let Some(bad) = members.iter().chain(&cand_embs).find(|e| e.dimension() != dim) {
        return Err(BackendError::DimensionMismatch { expected: dim, got: bad.dimension() }.into());
    }

    let n = ctx.ensemble.n_subsets;
    let mut mean = vec![0.0; dim];
    for m in &members {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v / n as f64;
        }
    }
    let pick = if members.is_empty() {
        0
    } else {
        let noisy = gaussian_vector(&mean, task.sigma, task.sensitivity, rng)?;
        select_candidate(&noisy, &cand_embs).expect("candidates are non-empty")
    };
    let entries = commit(ledger, task.ledger_entries(ctx.ensemble.subsample_rate), task.sigma > 0.0)?;
    let diagnostics = ctx.privacy_off_debug.then(|| {
        let cos: Vec<f64> = cand_embs.iter().map(|c| c.cosine(&mean)).collect();
        json!({ "non_private": true, "members": members.len(), "member_outputs": outputs, "candidate_cosines": cos })
    });
    Ok(Release { answer: candidates.swap_remove(pick), entries, fallback: members.is_empty(), diagnostics })
}
