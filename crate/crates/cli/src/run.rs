use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use dpicl_core::accounting::{calibrate_em_epsilon, calibrate_sigma, LedgerEntry, PrivacyLedger};
use dpicl_core::aggregation::{
    classify, esa_generate, ksa_generate, partition, AggregationError, ClassifyTask, EnsembleConfig, EsaTask,
    ExemplarStore, KsaMethod, KsaTask, Release, RunContext,
};
use dpicl_core::backend::{Backend, HttpBackend, MockBackend};
use dpicl_core::mechanisms::KRange;
use dpicl_core::metrics::ScoreReport;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{load_queries, BackendKind, FileConfig, KsaKind};
use crate::{Failure, PipelineArgs};

pub struct Global {
    pub config: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub seed: Option<u64>,
    pub endpoint_url: Option<String>,
    pub privacy_off_debug: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum TaskKind {
    Classify,
    Esa,
    Ksa(Option<KsaKind>),
}

enum Task {
    Classify(ClassifyTask),
    Esa(EsaTask),
    Ksa(KsaTask),
}

impl Task {
    fn is_private(&self) -> bool {
        match self {
            Task::Classify(t) => t.sigma > 0.0,
            Task::Esa(t) => t.sigma > 0.0,
            Task::Ksa(t) => match t.method {
                KsaMethod::JointEm { .. } => true,
                KsaMethod::Ptr { sigma, .. } => sigma > 0.0,
            },
        }
    }

    /// What one query adds to the ledger.
    fn entries(&self, q: f64) -> Vec<LedgerEntry> {
        if !self.is_private() {
            return Vec::new();
        }
        match self {
            Task::Classify(t) => t.ledger_entries(q),
            Task::Esa(t) => t.ledger_entries(q),
            Task::Ksa(t) => t.ledger_entries(q),
        }
    }

    fn run(
        &self,
        ctx: &RunContext<'_>,
        store: &ExemplarStore,
        index: usize,
        query: &str,
        seed: u64,
    ) -> Result<Release, AggregationError> {
        let part = partition(store, &ctx.ensemble.for_query(index as u64))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let mut scratch = PrivacyLedger::new();
        match self {
            Task::Classify(t) => classify(ctx, query, &part, t, &mut scratch, &mut rng),
            Task::Esa(t) => esa_generate(ctx, query, &part, t, &mut scratch, &mut rng),
            Task::Ksa(t) => ksa_generate(ctx, query, &part, t, &mut scratch, &mut rng),
        }
    }
}

#[derive(Serialize)]
struct ResultRecord<'a> {
    index: usize,
    query: &'a str,
    answer: &'a str,
    fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<&'a Value>,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Failure::Config(msg.into()).into()
}

/// Noise settings after merging file and flags.
struct Privacy {
    target: Option<f64>,
    delta: f64,
    sigma: Option<f64>,
    em_epsilon: Option<f64>,
    k_epsilon: Option<f64>,
    ptr_delta: Option<f64>,
    budget: Option<f64>,
}

impl Privacy {
    fn merge(file: &FileConfig, args: &PipelineArgs) -> anyhow::Result<Self> {
        let p = &file.privacy;
        let out = Self {
            target: args.epsilon.or(p.epsilon),
            delta: args.delta.unwrap_or(p.delta),
            sigma: args.sigma.or(p.sigma),
            em_epsilon: args.em_epsilon.or(p.em_epsilon),
            k_epsilon: args.k_epsilon.or(p.k_epsilon),
            ptr_delta: args.ptr_delta.or(p.ptr_delta),
            budget: args.budget,
        };
        if !(out.delta > 0.0 && out.delta < 1.0) {
            return Err(config_err(format!("delta = {} must lie in (0, 1)", out.delta)));
        }
        let explicit = out.sigma.is_some() || out.em_epsilon.is_some() || out.k_epsilon.is_some();
        match (out.target, explicit) {
            (Some(_), true) => Err(config_err("give either a target epsilon or explicit noise, not both")),
            (None, false) => Err(config_err("give a target epsilon or explicit noise")),
            (Some(eps), false) if !(eps > 0.0 && eps.is_finite()) => {
                Err(config_err(format!("target epsilon = {eps} must be finite and > 0")))
            }
            _ => Ok(out),
        }
    }
}

fn build_task(kind: TaskKind, file: &FileConfig, privacy: &Privacy, n_queries: u64, q: f64) -> anyhow::Result<Task> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| config_err(format!("explicit noise needs {name}")));
    let target_sigma = |eps: f64| calibrate_sigma(eps, privacy.delta, q, n_queries).context("calibrating sigma");
    Ok(match kind {
        TaskKind::Classify => {
            let (template, labels) = file.classify.resolve()?;
            // One changed vote moves a unit between two bins.
            let sigma = match privacy.target {
                Some(eps) => target_sigma(eps)? * std::f64::consts::SQRT_2,
                None => need(privacy.sigma, "sigma")?,
            };
            Task::Classify(ClassifyTask { template, labels, sigma })
        }
        TaskKind::Esa => {
            let e = &file.esa;
            let sigma = match privacy.target {
                Some(eps) => target_sigma(eps)?,
                None => need(privacy.sigma, "sigma")?,
            };
            Task::Esa(EsaTask {
                template: e.template.clone(),
                sigma,
                sensitivity: e.sensitivity.unwrap_or(std::f64::consts::SQRT_2),
                n_candidates: e.n_candidates,
                candidate_temperature: e.candidate_temperature,
                max_tokens: e.max_tokens,
                ..EsaTask::default()
            })
        }
        TaskKind::Ksa(method) => {
            let k = &file.ksa;
            let method = match method.unwrap_or(k.method) {
                KsaKind::JointEm => {
                    let epsilon = match privacy.target {
                        Some(eps) => {
                            calibrate_em_epsilon(eps, privacy.delta, n_queries).context("calibrating epsilon")?
                        }
                        None => need(privacy.em_epsilon, "em_epsilon")?,
                    };
                    KsaMethod::JointEm { k: k.k, epsilon }
                }
                KsaKind::Ptr => {
                    if privacy.target.is_some() {
                        return Err(config_err("ksa ptr has no calibration; give sigma, k_epsilon and ptr_delta"));
                    }
                    KsaMethod::Ptr {
                        k_range: KRange::new(k.k_min, k.k_max),
                        epsilon_k: need(privacy.k_epsilon, "k_epsilon")?,
                        sigma: need(privacy.sigma, "sigma")?,
                        delta: need(privacy.ptr_delta, "ptr_delta")?,
                    }
                }
            };
            Task::Ksa(KsaTask {
                prompts: k.prompts.clone(),
                tokenizer: k.tokenizer.clone(),
                method,
                max_tokens: k.max_tokens,
                ..KsaTask::default()
            })
        }
    })
}

fn build_backend(global: &Global, file: &FileConfig, seed: u64) -> anyhow::Result<Box<dyn Backend>> {
    let mut profile = file.profile.clone();
    if let Some(url) = &global.endpoint_url {
        profile.endpoint_url = url.clone();
    }
    Ok(match global.backend.or(file.backend).unwrap_or(BackendKind::Mock) {
        BackendKind::Mock => {
            let dimension = file.mock.dimension.unwrap_or(profile.embedding_dimension);
            let mut mock =
                MockBackend::new(seed).with_dimension(dimension).with_parallelism(profile.parallelism_cap.max(1));
            for rule in &file.mock.rules {
                mock = mock.with_rule(rule.pattern.clone(), rule.response.clone());
            }
            Box::new(mock)
        }
        BackendKind::Http => Box::new(HttpBackend::new(profile).map_err(|e| Failure::Backend(e.to_string()))?),
    })
}

fn default_ledger_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "results".into());
    output.with_file_name(format!("{stem}.ledger.jsonl"))
}

pub fn pipeline(global: &Global, kind: TaskKind, args: &PipelineArgs) -> anyhow::Result<()> {
    let mut file = FileConfig::load(global.config.as_deref())?;
    let seed = global.seed.or(file.seed).ok_or_else(|| config_err("a seed is required (--seed or `seed`)"))?;
    if let Some(n) = args.n_subsets {
        file.ensemble.n_subsets = n;
    }
    if let Some(s) = args.shots {
        file.ensemble.shots_per_subset = s;
    }
    if let Some(q) = args.subsample_rate {
        file.ensemble.subsample_rate = q;
    }
    let ensemble: EnsembleConfig = file.ensemble(seed)?;
    let privacy = Privacy::merge(&file, args)?;

    let exemplars = file.required_path(&args.exemplars.clone().or(file.exemplars.clone()), "exemplar")?;
    let queries_path = file.required_path(&args.queries.clone().or(file.queries.clone()), "query")?;
    let output = file.required_path(&args.output.clone().or(file.output.clone()), "output")?;
    let ledger_path = args.ledger.clone().or(file.ledger.clone()).unwrap_or_else(|| default_ledger_path(&output));

    let store = ExemplarStore::load(&exemplars).map_err(|e| config_err(format!("{}: {e}", exemplars.display())))?;
    let queries = load_queries(&queries_path)?;
    let mut ledger = PrivacyLedger::load(&ledger_path).with_context(|| format!("reading {}", ledger_path.display()))?;

    let task = if queries.is_empty() {
        None
    } else {
        Some(build_task(kind, &file, &privacy, queries.len() as u64, ensemble.subsample_rate)?)
    };
    if args.parallel_queries && privacy.target.is_none() {
        return Err(config_err("--parallel-queries needs a target epsilon so the whole run is paid for up front"));
    }
    let budget = privacy.budget.or(privacy.target);
    let backend = build_backend(global, &file, seed)?;
    if global.privacy_off_debug {
        log::warn!("privacy-off debug mode: results carry raw ensemble statistics and are NOT private");
        eprintln!("WARNING: --privacy-off-debug output is NOT differentially private");
    }
    let ctx =
        RunContext { backend: backend.as_ref(), ensemble: &ensemble, privacy_off_debug: global.privacy_off_debug };

    let out_file = File::create(&output).with_context(|| format!("creating {}", output.display()))?;
    let mut out = BufWriter::new(out_file);
    let mut write_record = |index: usize, release: &Release| -> anyhow::Result<()> {
        let record = ResultRecord {
            index,
            query: &queries[index],
            answer: &release.answer,
            fallback: release.fallback,
            diagnostics: release.diagnostics.as_ref(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    };

    let outcome = match &task {
        None => Ok(()),
        Some(task) => {
            let per_query = task.entries(ensemble.subsample_rate);
            let over_budget = |ledger: &PrivacyLedger, extra: &[LedgerEntry]| -> anyhow::Result<Option<f64>> {
                let Some(limit) = budget else { return Ok(None) };
                if extra.is_empty() {
                    return Ok(None);
                }
                let (eps, _) = ledger.projected(extra)?.total(privacy.delta)?;
                Ok((eps > limit).then_some(eps))
            };
            if args.parallel_queries {
                let all: Vec<LedgerEntry> = (0..queries.len()).flat_map(|_| per_query.iter().copied()).collect();
                if let Some(eps) = over_budget(&ledger, &all)? {
                    return Err(Failure::Budget(format!(
                        "{} queries would bring the ledger to epsilon {eps:.4} > {:.4}",
                        queries.len(),
                        budget.unwrap_or(f64::NAN)
                    ))
                    .into());
                }
                run_parallel(task, &ctx, &store, &queries, seed, &mut ledger, &ledger_path, &mut write_record)
            } else {
                let mut result = Ok(());
                for (i, query) in queries.iter().enumerate() {
                    if let Some(eps) = over_budget(&ledger, &per_query)? {
                        result = Err(Failure::Budget(format!(
                            "query {i} would bring the ledger to epsilon {eps:.4} > {:.4}",
                            budget.unwrap_or(f64::NAN)
                        ))
                        .into());
                        break;
                    }
                    match task.run(&ctx, &store, i, query, seed) {
                        Ok(release) => {
                            persist(&mut ledger, &ledger_path, &release.entries)?;
                            write_record(i, &release)?;
                        }
                        Err(e) => {
                            result = Err(anyhow::Error::new(e).context(format!("query {i}")));
                            break;
                        }
                    }
                }
                result
            }
        }
    };

    let (epsilon, delta) = if ledger.is_empty() { (0.0, privacy.delta) } else { ledger.total(privacy.delta)? };
    println!("{}", json!({ "epsilon": epsilon, "delta": delta, "ledger": ledger_path.display().to_string() }));
    outcome
}

fn persist(ledger: &mut PrivacyLedger, path: &Path, entries: &[LedgerEntry]) -> anyhow::Result<()> {
    for e in entries {
        ledger.append_to_file(path, *e).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Runs every query on a thread pool, then records results in query order.
/// Entries of every release that happened are recorded even if another query failed.
#[allow(clippy::too_many_arguments)]
fn run_parallel(
    task: &Task,
    ctx: &RunContext<'_>,
    store: &ExemplarStore,
    queries: &[String],
    seed: u64,
    ledger: &mut PrivacyLedger,
    ledger_path: &Path,
    write_record: &mut dyn FnMut(usize, &Release) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).min(queries.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Release, AggregationError>>>> =
        queries.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= queries.len() {
                    break;
                }
                let r = task.run(ctx, store, i, &queries[i], seed);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut first_err = None;
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.into_inner().unwrap().expect("every query ran") {
            Ok(release) => {
                persist(ledger, ledger_path, &release.entries)?;
                write_record(i, &release)?;
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(anyhow::Error::new(e).context(format!("query {i}")));
                }
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

#[derive(Debug, Clone, Copy)]
pub enum Calibration {
    Gaussian,
    Rnm,
    Em,
}

pub fn calibrate(mechanism: Calibration, epsilon: f64, delta: f64, n_queries: u64, q: f64) -> anyhow::Result<()> {
    let bad = |e: dpicl_core::accounting::AccountingError| Failure::Config(e.to_string());
    let out = match mechanism {
        Calibration::Gaussian => {
            let sigma = calibrate_sigma(epsilon, delta, q, n_queries).map_err(bad)?;
            json!({ "mechanism": "gaussian", "sigma": sigma })
        }
        Calibration::Rnm => {
            let m = calibrate_sigma(epsilon, delta, q, n_queries).map_err(bad)?;
            json!({ "mechanism": "rnm", "sigma": m * std::f64::consts::SQRT_2, "noise_multiplier": m })
        }
        Calibration::Em => {
            let eps0 = calibrate_em_epsilon(epsilon, delta, n_queries).map_err(bad)?;
            json!({ "mechanism": "em", "epsilon0": eps0 })
        }
    };
    println!("{out}");
    Ok(())
}

pub fn account(path: &Path, delta: f64) -> anyhow::Result<()> {
    let ledger = PrivacyLedger::load(path).with_context(|| format!("reading {}", path.display()))?;
    let (epsilon, delta) = if ledger.is_empty() {
        (0.0, delta)
    } else {
        ledger.total(delta).map_err(|e| Failure::Config(e.to_string()))?
    };
    println!("{}", json!({ "epsilon": epsilon, "delta": delta, "entries": ledger.len() }));
    Ok(())
}

fn read_field(path: &Path, fields: &[&str]) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| config_err(format!("{} line {}: {e}", path.display(), i + 1)))?;
            fields
                .iter()
                .find_map(|f| v.get(*f).and_then(Value::as_str))
                .map(str::to_string)
                .ok_or_else(|| config_err(format!("{} line {}: no {} string", path.display(), i + 1, fields.join("/"))))
        })
        .collect()
}

pub fn score(predictions: &Path, references: &Path, output: Option<&Path>) -> anyhow::Result<()> {
    let preds = read_field(predictions, &["answer"])?;
    let refs = read_field(references, &["reference", "answer"])?;
    if preds.len() != refs.len() {
        return Err(config_err(format!("{} predictions but {} references", preds.len(), refs.len())));
    }
    let report = ScoreReport::from_pairs(preds.iter().map(String::as_str).zip(refs.iter().map(String::as_str)));
    if let Some(path) = output {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", json!({ "n": preds.len(), "mean": report.mean }));
    Ok(())
}
