//! The ensemble pipeline: partition private exemplars, prompt the backend
//! once per subset, and release a single answer through a noisy aggregate.
//!
//! Pipelines join every ensemble response before any mechanism runs, then
//! append their ledger entries in one step. A run whose noise level is zero
//! is treated as non-private: it still answers but records nothing, since the
//! ledger cannot represent an unbounded cost.

mod classify;
mod esa;
mod ksa;
mod prompts;
mod store;

pub use classify::{classify, ensemble_votes, ClassifyTask};
pub use esa::{esa_generate, select_candidate, EsaTask};
pub use ksa::{
    build_keyword_histogram, ensemble_keyword_histogram, ksa_generate, KeywordHistogram, KsaMethod, KsaTask,
};
pub use prompts::{KeywordPrompts, PromptTemplate};
pub use store::{partition, EnsembleConfig, Exemplar, ExemplarStore, Partition};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::Value;
use thiserror::Error;

use crate::accounting::{AccountingError, LedgerEntry, PrivacyLedger};
use crate::backend::{Backend, BackendError};
use crate::mechanisms::MechanismError;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error("all {0} ensemble members failed at the backend")]
    AllSubsetsFailed(usize),
    #[error("configuration: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
}

/// What a pipeline needs besides its task parameters.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub backend: &'a dyn Backend,
    pub ensemble: &'a EnsembleConfig,
    /// Attach raw ensemble statistics to each release. Not private.
    pub privacy_off_debug: bool,
}

/// The released answer of one pipeline invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Release {
    pub answer: String,
    /// Ledger entries appended for this release (empty for non-private runs).
    pub entries: Vec<LedgerEntry>,
    /// Set when a failed private test led to a zero-shot answer.
    pub fallback: bool,
    /// Raw ensemble statistics, present only in privacy-off debug mode.
    pub diagnostics: Option<Value>,
}

fn commit(
    ledger: &mut PrivacyLedger,
    entries: Vec<LedgerEntry>,
    private: bool,
) -> Result<Vec<LedgerEntry>, AggregationError> {
    if !private {
        log::warn!("zero noise: release is not differentially private and is not recorded");
        return Ok(Vec::new());
    }
    for e in &entries {
        ledger.append(*e)?;
    }
    Ok(entries)
}

/// Applies `f` to every item on at most `cap` threads; results keep input order.
pub(crate) fn fan_out<T, U, F>(items: &[T], cap: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let workers = cap.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, U)>> = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                done.lock().expect("fan-out results").push((i, out));
            });
        }
    });
    let mut done = done.into_inner().expect("fan-out results");
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, u)| u).collect()
}

/// Completions for every subset, `None` where the backend failed.
fn member_completions(
    ctx: &RunContext<'_>,
    prompts: &[String],
    make: impl Fn(&str) -> crate::backend::CompletionRequest + Sync,
) -> Vec<Option<String>> {
    fan_out(prompts, ctx.backend.parallelism_cap(), |p| match ctx.backend.complete(&make(p)) {
        Ok(text) => Some(text),
        Err(e) => {
            log::warn!("ensemble member dropped: {e}");
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = fan_out(&items, 7, |&i| i * 2);
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert!(fan_out(&Vec::<usize>::new(), 4, |&i| i).is_empty());
    }
}
