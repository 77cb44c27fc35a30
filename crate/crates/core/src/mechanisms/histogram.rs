use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::MechanismError;

/// Opaque identifier of a class label or a vocabulary token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelId(pub u32);

impl LabelId {
    /// Ids at or above this value are reserved for zero-count padding entries.
    pub const SENTINEL_BASE: u32 = u32::MAX - (1 << 16);

    /// The `i`-th padding id. Padding ids sort after every ordinary id.
    pub fn sentinel(i: u32) -> Self {
        LabelId(Self::SENTINEL_BASE + i)
    }

    pub fn is_sentinel(self) -> bool {
        self.0 >= Self::SENTINEL_BASE
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Per-label counts produced by an ensemble of responses.
///
/// Each ensemble member contributes at most one to any count, so every count
/// is bounded by `ensemble_size`. For classification the counts also sum to the
/// number of members that voted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteHistogram {
    counts: BTreeMap<LabelId, u64>,
    ensemble_size: u64,
}

impl VoteHistogram {
    pub fn new(ensemble_size: u64) -> Self {
        Self { counts: BTreeMap::new(), ensemble_size }
    }

    /// A histogram with every label present at count zero.
    pub fn with_labels(labels: impl IntoIterator<Item = LabelId>, ensemble_size: u64) -> Self {
        let counts = labels.into_iter().map(|l| (l, 0)).collect();
        Self { counts, ensemble_size }
    }

    /// Builds a histogram from explicit counts, checking `count <= ensemble_size`.
    pub fn from_counts(
        counts: impl IntoIterator<Item = (LabelId, u64)>,
        ensemble_size: u64,
    ) -> Result<Self, MechanismError> {
        let mut hist = Self::new(ensemble_size);
        for (label, count) in counts {
            hist.set(label, count)?;
        }
        Ok(hist)
    }

    pub fn set(&mut self, label: LabelId, count: u64) -> Result<(), MechanismError> {
        if count > self.ensemble_size {
            return Err(MechanismError::InvalidParameter(format!(
                "count {count} for {label} exceeds ensemble size {}",
                self.ensemble_size
            )));
        }
        self.counts.insert(label, count);
        Ok(())
    }

    /// Adds one vote for `label`, registering the label if it is new.
    pub fn add_vote(&mut self, label: LabelId) -> Result<(), MechanismError> {
        let next = self.get(label) + 1;
        self.set(label, next)
    }

    pub fn get(&self, label: LabelId) -> u64 {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<LabelId, u64> {
        &self.counts
    }

    pub fn ensemble_size(&self) -> u64 {
        self.ensemble_size
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Adds zero-count padding entries until there are at least `min_len` candidates.
    pub fn pad_to(&mut self, min_len: usize) {
        let mut i = 0;
        while self.counts.len() < min_len {
            self.counts.entry(LabelId::sentinel(i)).or_insert(0);
            i += 1;
        }
    }

    /// Entries sorted by count descending, ties broken by ascending label id.
    pub fn sorted_desc(&self) -> Vec<(LabelId, u64)> {
        let mut entries: Vec<_> = self.counts.iter().map(|(&l, &c)| (l, c)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        entries
    }
}

/// Gaps `d_k = H_(k) - H_(k+1)` between consecutive order statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapProfile {
    /// `gaps[k - 1]` holds `d_k`.
    gaps: Vec<u64>,
    order: Vec<LabelId>,
}

impl GapProfile {
    pub fn from_histogram(hist: &VoteHistogram) -> Self {
        let sorted = hist.sorted_desc();
        let gaps = sorted.windows(2).map(|w| w[0].1 - w[1].1).collect();
        let order = sorted.into_iter().map(|(l, _)| l).collect();
        Self { gaps, order }
    }

    /// `d_k` for `k` in `1..=len()`.
    pub fn gap(&self, k: usize) -> Option<u64> {
        k.checked_sub(1).and_then(|i| self.gaps.get(i)).copied()
    }

    pub fn gaps(&self) -> &[u64] {
        &self.gaps
    }

    /// Labels in descending-count order.
    pub fn order(&self) -> &[LabelId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

/// Noise and privacy parameters handed to a mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Gaussian noise scale.
    pub sigma: f64,
    /// Exponential-mechanism privacy parameter.
    pub epsilon: f64,
    /// Propose-test-release failure probability.
    pub delta: f64,
    pub sensitivity: f64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<(), MechanismError> {
        let bad = |what: &str, v: f64| Err(MechanismError::InvalidParameter(format!("{what} = {v} is out of range")));
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma", self.sigma);
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", self.epsilon);
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", self.delta);
        }
        if !(self.sensitivity > 0.0) || !self.sensitivity.is_finite() {
            return bad("sensitivity", self.sensitivity);
        }
        Ok(())
    }
}
