//! Word tokenization shared by keyword aggregation and the metrics.

use serde::{Deserialize, Serialize};

/// Short English function words dropped by [`Tokenizer::keywords`].
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "been", "but", "by", "for", "from", "had", "has", "have", "he", "her",
    "his", "i", "in", "is", "it", "its", "of", "on", "or", "she", "so", "that", "the", "their", "them", "they", "this",
    "to", "was", "we", "were", "will", "with", "you",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub lowercase: bool,
    /// Tokens shorter than this (in chars) are dropped by `keywords`.
    pub min_len: usize,
    pub stopwords: Vec<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { lowercase: true, min_len: 2, stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect() }
    }
}

impl Tokenizer {
    /// Splits on every non-alphanumeric character, keeping all pieces in order.
    pub fn words(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| if self.lowercase { w.to_lowercase() } else { w.to_string() })
            .collect()
    }

    /// Content words: [`words`](Self::words) minus short tokens and stopwords.
    pub fn keywords(&self, text: &str) -> Vec<String> {
        self.words(text)
            .into_iter()
            .filter(|w| w.chars().count() >= self.min_len && !self.stopwords.iter().any(|s| s == w))
            .collect()
    }
}
