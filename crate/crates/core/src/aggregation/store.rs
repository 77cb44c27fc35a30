use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::AggregationError;
use crate::hash::{seeded_rng, stable_hash, unit_interval};

/// One private demonstration: an input and its answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: String,
    pub answer: String,
}

/// Private exemplars under stable ids.
///
/// Ids are assigned in insertion order and never reused, so removing a
/// record leaves every other record's id (and its partition slot) unchanged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarStore {
    records: BTreeMap<u64, Exemplar>,
    next_id: u64,
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = Exemplar>) -> Self {
        let mut s = Self::new();
        for r in records {
            s.insert(r);
        }
        s
    }

    /// Parses one `{"input": ..., "answer": ...}` object per non-empty line.
    pub fn from_jsonl(text: &str) -> Result<Self, AggregationError> {
        let mut s = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Exemplar = serde_json::from_str(line)
                .map_err(|e| AggregationError::Input(format!("exemplar line {}: {e}", i + 1)))?;
            s.insert(rec);
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, AggregationError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| AggregationError::Input(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn insert(&mut self, record: Exemplar) -> u64 {
        let id = self.next_id;
        self.records.insert(id, record);
        self.next_id += 1;
        id
    }

    pub fn remove(&mut self, id: u64) -> Option<Exemplar> {
        self.records.remove(&id)
    }

    pub fn get(&self, id: u64) -> Option<&Exemplar> {
        self.records.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of ids ever issued, removed ones included.
    pub fn capacity(&self) -> u64 {
        self.next_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Upper bound on the number of subsets (ensemble members).
    pub n_subsets: usize,
    pub shots_per_subset: usize,
    /// Poisson inclusion probability of each record.
    pub subsample_rate: f64,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), AggregationError> {
        if self.n_subsets == 0 || self.shots_per_subset == 0 {
            return Err(AggregationError::Config("n_subsets and shots_per_subset must be positive".into()));
        }
        if !(self.subsample_rate > 0.0 && self.subsample_rate <= 1.0) {
            return Err(AggregationError::Config(format!(
                "subsample_rate = {} must lie in (0, 1]",
                self.subsample_rate
            )));
        }
        Ok(())
    }

    /// The same configuration with a seed derived for query `index`.
    pub fn for_query(&self, index: u64) -> Self {
        Self { seed: stable_hash(&[&self.seed.to_le_bytes(), b"query", &index.to_le_bytes()]), ..*self }
    }
}

/// Disjoint exemplar subsets, each listed with the store ids of its records.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub subsets: Vec<Vec<(u64, Exemplar)>>,
    /// Records kept by Poisson sampling, before grouping.
    pub sampled: usize,
}

impl Partition {
    pub fn exemplars(&self, i: usize) -> Vec<Exemplar> {
        self.subsets[i].iter().map(|(_, e)| e.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }
}

/// Poisson-subsamples the store and groups the sample into disjoint subsets.
///
/// Each id gets a slot from a seeded permutation of `0..capacity` and is kept
/// with probability `q` by a coin derived from `(seed, id)`. A kept record
/// with slot `p` joins group `floor(p q / shots)`; groups at or beyond
/// `n_subsets` are dropped, each group keeps its first `shots` records by
/// slot, and empty groups are skipped. Since a record's slot, coin and group
/// do not depend on other records, deleting one record changes at most the
/// one subset that held it.
///
/// With `q = 1` and `capacity = n_subsets * shots` this is an exact shuffle
/// into `n_subsets` full groups.
pub fn partition(store: &ExemplarStore, cfg: &EnsembleConfig) -> Result<Partition, AggregationError> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(AggregationError::Input("exemplar store is empty".into()));
    }
    let seed = cfg.seed.to_le_bytes();
    let mut slots: Vec<u64> = (0..store.capacity()).collect();
    slots.shuffle(&mut seeded_rng(&[&seed, b"partition-slots"]));

    let q = cfg.subsample_rate;
    let mut sampled: Vec<(u64, u64)> = store
        .ids()
        .filter(|&id| q >= 1.0 || unit_interval(stable_hash(&[&seed, b"poisson", &id.to_le_bytes()])) < q)
        .map(|id| (slots[id as usize], id))
        .collect();
    sampled.sort_unstable();

    let mut groups: Vec<Vec<(u64, Exemplar)>> = vec![Vec::new(); cfg.n_subsets];
    for &(slot, id) in &sampled {
        let g = (slot as f64 * q / cfg.shots_per_subset as f64).floor() as usize;
        if g < cfg.n_subsets && groups[g].len() < cfg.shots_per_subset {
            groups[g].push((id, store.get(id).expect("sampled id exists").clone()));
        }
    }
    let subsets: Vec<_> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    if subsets.len() < cfg.n_subsets {
        log::warn!("partition produced {} of {} subsets", subsets.len(), cfg.n_subsets);
    }
    Ok(Partition { subsets, sampled: sampled.len() })
}
