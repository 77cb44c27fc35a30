#![allow(dead_code)]

use std::collections::BTreeSet;

use dpicl_core::aggregation::{
    ensemble_keyword_histogram, ensemble_votes, partition, ClassifyTask, EnsembleConfig, Exemplar, ExemplarStore,
    KsaTask, PromptTemplate, RunContext,
};
use dpicl_core::backend::MockBackend;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "meeting", "friday", "pizza", "tickets", "train", "late", "office", "birthday", "party", "movie", "dinner",
    "weekend", "beach", "exam", "coffee", "flight", "hotel", "concert", "gift", "project",
];

pub fn labels() -> Vec<String> {
    vec!["Positive".to_string(), "Negative".to_string()]
}

pub fn store_with_answers(answers: &[&str]) -> ExemplarStore {
    ExemplarStore::from_records(
        answers
            .iter()
            .enumerate()
            .map(|(i, a)| Exemplar { input: format!("review number {i}"), answer: a.to_string() }),
    )
}

pub fn sentence(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Largest per-bin and per-token count change between a random store and a
/// copy with one record removed, under the same partition seed.
pub fn neighbor_influence(seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(10..80);
    let store = ExemplarStore::from_records((0..n).map(|_| {
        let len = rng.random_range(2..8);
        Exemplar {
            input: sentence(&mut rng, len),
            answer: if rng.random_bool(0.6) { "Positive".into() } else { "Negative".into() },
        }
    }));
    let gen_store = ExemplarStore::from_records((0..n).map(|_| {
        let (a, b) = (rng.random_range(2..8), rng.random_range(2..6));
        Exemplar { input: sentence(&mut rng, a), answer: sentence(&mut rng, b) }
    }));
    let cfg = EnsembleConfig {
        n_subsets: rng.random_range(2..12),
        shots_per_subset: rng.random_range(1..5),
        subsample_rate: rng.random_range(0.05..1.0),
        seed: rng.random(),
    };
    let victim = rng.random_range(0..n) as u64;
    let query = sentence(&mut rng, 6);
    let backend = MockBackend::new(rng.random()).with_dimension(8);
    let ctx = RunContext { backend: &backend, ensemble: &cfg, privacy_off_debug: false };

    let task = ClassifyTask { template: PromptTemplate::sst2(), labels: labels(), sigma: 1.0 };
    let mut small = store.clone();
    small.remove(victim);
    let votes = |s: &ExemplarStore| {
        let p = partition(s, &cfg).unwrap();
        ensemble_votes(&ctx, &query, &p, &task).unwrap()
    };
    let (va, vb) = (votes(&store), votes(&small));
    let bin_diff = va.counts().keys().map(|&l| va.get(l).abs_diff(vb.get(l))).max().unwrap_or(0);

    let ksa = KsaTask::default();
    let mut small_gen = gen_store.clone();
    small_gen.remove(victim);
    let hist = |s: &ExemplarStore| {
        let p = partition(s, &cfg).unwrap();
        ensemble_keyword_histogram(&ctx, &query, &p, &ksa).unwrap().0
    };
    let (ha, hb) = (hist(&gen_store), hist(&small_gen));
    let tokens: BTreeSet<&String> = ha.tokens().iter().chain(hb.tokens()).collect();
    let token_diff = tokens.iter().map(|t| ha.count(t).abs_diff(hb.count(t))).max().unwrap_or(0);
    (bin_diff, token_diff)
}
