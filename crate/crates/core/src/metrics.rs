//! Accuracy, ROUGE and Levenshtein scores on a 0-100 scale.
//!
//! ROUGE works on [`Tokenizer::words`] (case-folded, no stopword removal);
//! Levenshtein works on Unicode scalar values.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::Tokenizer;

fn f1(overlap: usize, cand_len: usize, ref_len: usize) -> f64 {
    match (cand_len, ref_len) {
        (0, 0) => 100.0,
        (0, _) | (_, 0) => 0.0,
        _ if overlap == 0 => 0.0,
        _ => {
            let p = overlap as f64 / cand_len as f64;
            let r = overlap as f64 / ref_len as f64;
            100.0 * 2.0 * p * r / (p + r)
        }
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap: sum over n-grams of `min(count_cand, count_ref)`.
fn clipped_overlap(cand: &[String], reference: &[String], n: usize) -> usize {
    let r = ngrams(reference, n);
    ngrams(cand, n).iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum()
}

fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let tok = Tokenizer::default();
    let (c, r) = (tok.words(candidate), tok.words(reference));
    let count = |t: &[String]| t.len().saturating_sub(n - 1);
    if c.is_empty() || r.is_empty() {
        return f1(0, c.len(), r.len());
    }
    if count(&c) == 0 && count(&r) == 0 {
        // Both too short for a single n-gram.
        return if c == r { 100.0 } else { 0.0 };
    }
    f1(clipped_overlap(&c, &r, n), count(&c), count(&r))
}

pub fn rouge1(candidate: &str, reference: &str) -> f64 {
    rouge_n(candidate, reference, 1)
}

pub fn rouge2(candidate: &str, reference: &str) -> f64 {
    rouge_n(candidate, reference, 2)
}

pub(crate) fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common token subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let tok = Tokenizer::default();
    let (c, r) = (tok.words(candidate), tok.words(reference));
    f1(lcs_len(&c, &r), c.len(), r.len())
}

/// `100 (1 - d / max(len))` with `d` the character edit distance.
pub fn levenshtein_similarity(candidate: &str, reference: &str) -> f64 {
    let longest = candidate.chars().count().max(reference.chars().count());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - strsim::levenshtein(candidate, reference) as f64 / longest as f64)
}

/// 100 when the prediction equals the reference after trimming, else 0.
pub fn exact_match(candidate: &str, reference: &str) -> f64 {
    if candidate.trim() == reference.trim() {
        100.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub accuracy: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub levenshtein: f64,
}

impl ExampleScores {
    pub fn compute(candidate: &str, reference: &str) -> Self {
        Self {
            accuracy: exact_match(candidate, reference),
            rouge1: rouge1(candidate, reference),
            rouge2: rouge2(candidate, reference),
            rouge_l: rouge_l(candidate, reference),
            levenshtein: levenshtein_similarity(candidate, reference),
        }
    }
}

/// Per-example scores and their arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub examples: Vec<ExampleScores>,
    pub mean: ExampleScores,
}

impl ScoreReport {
    /// Scores aligned `(candidate, reference)` pairs. An empty corpus has all means at 0.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let examples: Vec<ExampleScores> = pairs.into_iter().map(|(c, r)| ExampleScores::compute(c, r)).collect();
        let n = examples.len().max(1) as f64;
        let mean_of = |f: fn(&ExampleScores) -> f64| examples.iter().map(f).sum::<f64>() / n;
        let mean = ExampleScores {
            accuracy: mean_of(|e| e.accuracy),
            rouge1: mean_of(|e| e.rouge1),
            rouge2: mean_of(|e| e.rouge2),
            rouge_l: mean_of(|e| e.rouge_l),
            levenshtein: mean_of(|e| e.levenshtein),
        };
        Self { examples, mean }
    }
}
