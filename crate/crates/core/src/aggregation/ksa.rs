use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{commit, member_completions, AggregationError, KeywordPrompts, Partition, Release, RunContext};
use crate::accounting::{LedgerEntry, Mechanism, PrivacyLedger};
use crate::backend::CompletionRequest;
use crate::mechanisms::{find_best_k, joint_em_top_k, top_k_with_ptr, KRange, LabelId, MechanismError, VoteHistogram};
use crate::text::Tokenizer;

/// Token counts over a set of responses; `LabelId(i)` names `tokens()[i]`.
///
/// Tokens are kept in lexicographic order, so ids (and the mechanisms'
/// id-based tie-breaks) do not depend on response order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordHistogram {
    hist: VoteHistogram,
    tokens: Vec<String>,
}

impl KeywordHistogram {
    fn from_map(counts: BTreeMap<String, u64>, ensemble_size: u64) -> Self {
        let tokens: Vec<String> = counts.keys().cloned().collect();
        let hist = VoteHistogram::from_counts(
            counts.values().enumerate().map(|(i, &c)| (LabelId(i as u32), c)),
            ensemble_size,
        )
        .expect("per-response dedup keeps counts within the ensemble size");
        Self { hist, tokens }
    }

    pub fn histogram(&self) -> &VoteHistogram {
        &self.hist
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token of an id, `None` for padding ids.
    pub fn token(&self, id: LabelId) -> Option<&str> {
        self.tokens.get(id.0 as usize).map(String::as_str)
    }

    pub fn count(&self, token: &str) -> u64 {
        self.tokens.binary_search_by(|t| t.as_str().cmp(token)).map(|i| self.hist.get(LabelId(i as u32))).unwrap_or(0)
    }

    pub fn to_map(&self) -> BTreeMap<String, u64> {
        self.tokens.iter().map(|t| (t.clone(), self.count(t))).collect()
    }

    /// Counts over `domain` only; domain tokens that never occurred get zero.
    pub fn restricted_to(&self, domain: &[String]) -> Self {
        let counts = domain.iter().map(|t| (t.clone(), self.count(t))).collect();
        Self::from_map(counts, self.hist.ensemble_size())
    }
}

/// Counts, for every token, the number of responses containing it.
pub fn build_keyword_histogram(responses: &[String], tokenizer: &Tokenizer) -> KeywordHistogram {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in responses {
        let distinct: BTreeSet<String> = tokenizer.keywords(r).into_iter().collect();
        for t in distinct {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    KeywordHistogram::from_map(counts, responses.len().max(1) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum KsaMethod {
    /// Joint exponential mechanism over ranked `k`-sequences drawn from the
    /// query's own keywords (a public domain).
    JointEm { k: usize, epsilon: f64 },
    /// Private choice of `k` followed by propose-test-release of the top-`k` set.
    Ptr { k_range: KRange, epsilon_k: f64, sigma: f64, delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KsaTask {
    pub prompts: KeywordPrompts,
    pub tokenizer: Tokenizer,
    pub method: KsaMethod,
    pub max_tokens: u32,
    pub member_temperature: f64,
}

impl Default for KsaTask {
    fn default() -> Self {
        Self {
            prompts: KeywordPrompts::default(),
            tokenizer: Tokenizer::default(),
            method: KsaMethod::JointEm { k: 10, epsilon: 1.0 },
            max_tokens: 64,
            member_temperature: 0.0,
        }
    }
}

impl KsaTask {
    pub fn ledger_entries(&self, q: f64) -> Vec<LedgerEntry> {
        match self.method {
            KsaMethod::JointEm { epsilon, .. } => vec![LedgerEntry::new(Mechanism::Exponential { epsilon }, q, 1)],
            KsaMethod::Ptr { epsilon_k, sigma, delta, .. } => vec![
                LedgerEntry::new(Mechanism::Exponential { epsilon: epsilon_k }, q, 1),
                LedgerEntry::new(Mechanism::Ptr { sigma, delta_fail: delta }, q, 1),
            ],
        }
    }

    fn is_private(&self) -> bool {
        match self.method {
            KsaMethod::JointEm { .. } => true,
            KsaMethod::Ptr { sigma, .. } => sigma > 0.0,
        }
    }
}

/// Keyword histogram of the ensemble's outputs, plus the outputs themselves.
pub fn ensemble_keyword_histogram(
    ctx: &RunContext<'_>,
    query: &str,
    partition: &Partition,
    task: &KsaTask,
) -> Result<(KeywordHistogram, Vec<String>), AggregationError> {
    let template = &task.prompts.template;
    let prompts: Vec<String> = (0..partition.len()).map(|i| template.render(&partition.exemplars(i), query)).collect();
    let outputs: Vec<String> = member_completions(ctx, &prompts, |p| {
        CompletionRequest::new(p).max_tokens(task.max_tokens).temperature(task.member_temperature)
    })
    .into_iter()
    .flatten()
    .collect();
    if !partition.is_empty() && outputs.is_empty() {
        return Err(AggregationError::AllSubsetsFailed(partition.len()));
    }
    // Failed members still count toward the bound on each token's count.
    let mut hist = build_keyword_histogram(&outputs, &task.tokenizer);
    hist.hist =
        VoteHistogram::from_counts(hist.hist.counts().iter().map(|(&l, &c)| (l, c)), partition.len().max(1) as u64)?;
    Ok((hist, outputs))
}

/// Releases keywords from the ensemble's outputs and answers a zero-shot
/// prompt that suggests them.
///
/// A replaced ensemble member can raise some counts and lower others, so
/// the joint mechanism's utility has sensitivity 2 and runs at `epsilon / 2`.
/// When the PTR test fails the answer is a plain zero-shot completion.
pub fn ksa_generate<R: Rng + ?Sized>(
    ctx: &RunContext<'_>,
    query: &str,
    partition: &Partition,
    task: &KsaTask,
    ledger: &mut PrivacyLedger,
    rng: &mut R,
) -> Result<Release, AggregationError> {
    let (hist, outputs) = ensemble_keyword_histogram(ctx, query, partition, task)?;
    let prompts = &task.prompts;
    let (keywords, instruction, chosen_k) = match task.method {
        KsaMethod::JointEm { k, epsilon } => {
            let mut domain = task.tokenizer.keywords(query);
            domain.sort();
            domain.dedup();
            let public = hist.restricted_to(&domain);
            if public.tokens().len() < k {
                return Err(MechanismError::TooFewCandidates { needed: k, available: public.tokens().len() }.into());
            }
            let seq = joint_em_top_k(public.histogram(), k, epsilon / 2.0, rng)?;
            let words = seq.iter().filter_map(|&id| public.token(id).map(str::to_string)).collect();
            (Some(words), &prompts.ranked_instruction, k)
        }
        KsaMethod::Ptr { k_range, epsilon_k, sigma, delta } => {
            if k_range.min == 0 || k_range.min > k_range.max {
                return Err(AggregationError::Config(format!("invalid k range {}..={}", k_range.min, k_range.max)));
            }
            let mut padded = hist.histogram().clone();
            padded.pad_to(k_range.max + 1);
            let k = find_best_k(&padded, epsilon_k, |k| k_range.regularizer(k), rng)?;
            let released = top_k_with_ptr(&padded, k, sigma, delta, rng)?;
            let words: Option<Vec<String>> = released
                .map(|set| set.into_iter().filter_map(|id| hist.token(id).map(str::to_string)).collect::<Vec<_>>())
                .filter(|w| !w.is_empty());
            (words, &prompts.set_instruction, k)
        }
    };

    let template = &prompts.template;
    let fallback = keywords.is_none();
    let prompt = match &keywords {
        Some(words) => template.render_with_keywords(query, instruction, words),
        None => template.render(&[], query),
    };
    let req = CompletionRequest::new(prompt).max_tokens(task.max_tokens).temperature(task.member_temperature);
    let answer = ctx.backend.complete(&req)?;
    let entries = commit(ledger, task.ledger_entries(ctx.ensemble.subsample_rate), task.is_private())?;
    let diagnostics = ctx.privacy_off_debug.then(|| {
        let top: Vec<_> = hist
            .histogram()
            .sorted_desc()
            .into_iter()
            .take(50)
            .filter_map(|(id, c)| hist.token(id).map(|t| json!([t, c])))
            .collect();
        json!({ "non_private": true, "member_outputs": outputs, "top_tokens": top, "k": chosen_k, "keywords": keywords })
    });
    Ok(Release { answer, entries, fallback, diagnostics })
}
