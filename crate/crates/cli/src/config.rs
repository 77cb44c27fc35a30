use std::path::{Path, PathBuf};

use anyhow::Context;
use dpicl_core::aggregation::{EnsembleConfig, KeywordPrompts, PromptTemplate};
use dpicl_core::backend::BackendProfile;
use dpicl_core::text::Tokenizer;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KsaKind {
    JointEm,
    Ptr,
}

/// Contents of the TOML run configuration. Every field is optional; flags
/// given on the command line take precedence.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub exemplars: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    pub ensemble: EnsembleSection,
    pub privacy: PrivacySection,
    pub classify: ClassifySection,
    pub esa: EsaSection,
    pub ksa: KsaSection,
    pub profile: BackendProfile,
    pub mock: MockSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub n_subsets: usize,
    pub shots_per_subset: usize,
    pub subsample_rate: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { n_subsets: 10, shots_per_subset: 4, subsample_rate: 1.0 }
    }
}

/// Either a target budget (`epsilon`, calibrated over the query count) or
/// explicit noise (`sigma`, plus `em_epsilon` / `k_epsilon` / `ptr_delta`
/// where the method needs them).
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub sigma: Option<f64>,
    pub em_epsilon: Option<f64>,
    pub k_epsilon: Option<f64>,
    pub ptr_delta: Option<f64>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self { epsilon: None, delta: 1e-5, sigma: None, em_epsilon: None, k_epsilon: None, ptr_delta: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    /// Preset name (`sst2`, `amazon`, `agnews`, `trec`).
    pub preset: String,
    pub template: Option<PromptTemplate>,
    pub labels: Option<Vec<String>>,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self { preset: "sst2".into(), template: None, labels: None }
    }
}

impl ClassifySection {
    pub fn resolve(&self) -> anyhow::Result<(PromptTemplate, Vec<String>)> {
        let template = match &self.template {
            Some(t) => t.clone(),
            None => PromptTemplate::preset(&self.preset)
                .ok_or_else(|| Failure::Config(format!("unknown template preset {:?}", self.preset)))?,
        };
        let labels = match &self.labels {
            Some(l) => l.clone(),
            None => PromptTemplate::preset_labels(&self.preset).ok_or_else(|| {
                Failure::Config(format!("preset {:?} has no labels; set classify.labels", self.preset))
            })?,
        };
        Ok((template, labels))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsaSection {
    pub template: PromptTemplate,
    pub n_candidates: usize,
    pub sensitivity: Option<f64>,
    pub candidate_temperature: f64,
    pub max_tokens: u32,
}

impl Default for EsaSection {
    fn default() -> Self {
        Self {
            template: PromptTemplate::dialogue_summary(),
            n_candidates: 20,
            sensitivity: None,
            candidate_temperature: 1.0,
            max_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KsaSection {
    pub method: KsaKind,
    /// Number of keywords released by the joint mechanism.
    pub k: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub prompts: KeywordPrompts,
    pub tokenizer: Tokenizer,
    pub max_tokens: u32,
}

impl Default for KsaSection {
    fn default() -> Self {
        Self {
            method: KsaKind::JointEm,
            k: 10,
            k_min: 15,
            k_max: 30,
            prompts: KeywordPrompts::default(),
            tokenizer: Tokenizer::default(),
            max_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub dimension: Option<usize>,
    pub rules: Vec<MockRule>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub pattern: String,
    pub response: String,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn ensemble(&self, seed: u64) -> anyhow::Result<EnsembleConfig> {
        let e = &self.ensemble;
        let cfg = EnsembleConfig {
            n_subsets: e.n_subsets,
            shots_per_subset: e.shots_per_subset,
            subsample_rate: e.subsample_rate,
            seed,
        };
        cfg.validate().map_err(|err| Failure::Config(err.to_string()))?;
        Ok(cfg)
    }

    pub fn required_path(&self, path: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
        path.clone().ok_or_else(|| Failure::Config(format!("no {what} path given")).into())
    }
}

/// Reads queries: one JSON object with a `query` field per line, or plain text lines.
pub fn load_queries(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            if line.trim_start().starts_with('{') {
                let v: serde_json::Value =
                    serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
                v.get("query").and_then(|q| q.as_str()).map(str::to_string).ok_or_else(|| {
                    Failure::Config(format!("{} line {}: no \"query\" string", path.display(), i + 1)).into()
                })
            } else {
                Ok(line.to_string())
            }
        })
        .collect()
}
