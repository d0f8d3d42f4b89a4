use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use convctl_core::evalgen::SamplerConfig;
use convctl_core::extract::{ExtractionRules, DEFAULT_REFERENCES_PER_USER};
use convctl_core::model::ModelConfig;
use convctl_core::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dumps: Vec<PathBuf>,
    pub conversations: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Training output directory; also what `eval`, `sample` and `serve` read.
    pub model_dir: Option<PathBuf>,
}

/// The whole pipeline as one JSON document. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub extraction: ExtractionRules,
    pub references_per_user: usize,
    pub vocab_size: usize,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            extraction: ExtractionRules::default(),
            references_per_user: DEFAULT_REFERENCES_PER_USER,
            vocab_size: convctl_core::tokenizer::DEFAULT_VOCAB_SIZE,
            model: None,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Resolves a path from a flag, else the config file, else fails naming both.
pub fn pick(flag: &Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    flag.clone()
        .or_else(|| config.clone())
        .with_context(|| format!("no {what} path: pass --{what} or set paths.{what} in the config"))
}
