use std::f64::consts::SQRT_2;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{commit, member_completions, AggregationError, Partition, PromptTemplate, Release, RunContext};
use crate::accounting::{LedgerEntry, Mechanism, PrivacyLedger};
use crate::backend::CompletionRequest;
use crate::mechanisms::{rnm_gaussian, LabelId, VoteHistogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyTask {
    pub template: PromptTemplate,
    pub labels: Vec<String>,
    /// Standard deviation of the noise added to each vote count.
    pub sigma: f64,
}

impl ClassifyTask {
    /// One vote moving between two bins shifts the histogram by `sqrt 2` in
    /// L2, so the recorded noise multiplier is `sigma / sqrt 2`.
    pub fn ledger_entries(&self, q: f64) -> Vec<LedgerEntry> {
        vec![LedgerEntry::new(Mechanism::Gaussian { sigma: self.sigma / SQRT_2 }, q, 1)]
    }

    fn validate(&self) -> Result<(), AggregationError> {
        if self.labels.is_empty() {
            return Err(AggregationError::Config("at least one label is required".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(AggregationError::Config(format!("sigma = {} must be finite and >= 0", self.sigma)));
        }
        Ok(())
    }
}

/// One-hot votes of every subset. Members whose request fails, or whose
/// answer is not a label, do not vote.
pub fn ensemble_votes(
    ctx: &RunContext<'_>,
    query: &str,
    partition: &Partition,
    task: &ClassifyTask,
) -> Result<VoteHistogram, AggregationError> {
    task.validate()?;
    let ids = (0..task.labels.len() as u32).map(LabelId);
    let mut hist = VoteHistogram::with_labels(ids, partition.len().max(1) as u64);
    if partition.is_empty() {
        return Ok(hist);
    }
    let prompts: Vec<String> =
        (0..partition.len()).map(|i| task.template.render(&partition.exemplars(i), query)).collect();
    let answers = member_completions(ctx, &prompts, |p| CompletionRequest::new(p).constrained(&task.labels));
    let mut voted = 0;
    for answer in answers.into_iter().flatten() {
        match task.labels.iter().position(|l| *l == answer) {
            Some(i) => {
                hist.add_vote(LabelId(i as u32))?;
                voted += 1;
            }
            None => log::warn!("ensemble member answered {answer:?}, not a label"),
        }
    }
    if voted == 0 {
        return Err(AggregationError::AllSubsetsFailed(partition.len()));
    }
    Ok(hist)
}

/// Noisy-argmax label over the ensemble's votes.
///
/// With zero subsets the histogram is all zeros and the release is pure noise.
pub fn classify<R: Rng + ?Sized>(
    ctx: &RunContext<'_>,
    query: &str,
    partition: &Partition,
    task: &ClassifyTask,
    ledger: &mut PrivacyLedger,
    rng: &mut R,
) -> Result<Release, AggregationError> {
    let hist = ensemble_votes(ctx, query, partition, task)?;
    let winner = rnm_gaussian(&hist, task.sigma, rng)?;
    let entries = commit(ledger, task.ledger_entries(ctx.ensemble.subsample_rate), task.sigma > 0.0)?;
    let diagnostics = ctx.privacy_off_debug.then(|| {
        let votes: serde_json::Map<_, _> =
            task.labels.iter().enumerate().map(|(i, l)| (l.clone(), json!(hist.get(LabelId(i as u32))))).collect();
        json!({ "non_private": true, "subsets": partition.len(), "votes": votes })
    });
    Ok(Release { answer: task.labels[winner.0 as usize].clone(), entries, fallback: false, diagnostics })
}
