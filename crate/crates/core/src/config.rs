//! Experiment configuration: one JSON document naming the datasets and every
//! model, diffusion, training and evaluation setting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DatasetSpec, Manifest, SubsetMode, SubsetSpec};
use crate::denoiser::ModelConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalProtocol;
use crate::trainer::TrainConfig;
use crate::ts2img::EmbedConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchModelSpec {
    pub name: String,
    /// Pre-trained checkpoint to fine-tune; absent means train from scratch.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub models: Vec<BenchModelSpec>,
    /// Defaults to the target dataset.
    pub datasets: Vec<String>,
    pub subsets: Vec<SubsetMode>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            datasets: Vec::new(),
            subsets: vec![
                SubsetMode::FixedCount(10),
                SubsetMode::FixedCount(25),
                SubsetMode::FixedCount(50),
                SubsetMode::Percentage(0.05),
                SubsetMode::Percentage(0.10),
                SubsetMode::Percentage(0.15),
                SubsetMode::Full,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// A manifest file whose datasets are appended to `datasets`.
    pub manifest: Option<PathBuf>,
    pub datasets: Vec<DatasetSpec>,
    /// Pre-training corpus; empty means every dataset except `target`.
    pub pretrain_datasets: Vec<String>,
    /// Dataset for fine-tuning, sampling and evaluation.
    pub target: Option<String>,
    /// Input checkpoint for finetune, sample and evaluate.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub embed: EmbedConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub subset: SubsetSpec,
    pub eval: EvalProtocol,
    pub benchmark: BenchmarkConfig,
    /// Number of series written by `sample`.
    pub num_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            manifest: None,
            datasets: Vec::new(),
            pretrain_datasets: Vec::new(),
            target: None,
            checkpoint: None,
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            embed: EmbedConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            subset: SubsetSpec {
                mode: SubsetMode::Full,
                seed: 0,
            },
            eval: EvalProtocol::default(),
            benchmark: BenchmarkConfig::default(),
            num_samples: 100,
        }
    }
}

/// Sets `path` (dot-separated keys) in `doc` to `raw`, read as JSON when it
/// parses and as a string otherwise. Missing intermediate objects are created.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?} descends into a non-object")))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {path:?} descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(&str, &str)> {
    arg.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not key=value")))
}

impl ExperimentConfig {
    /// Parses `doc` after applying `overrides`, then validates.
    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            let (k, v) = parse_override(o)?;
            apply_override(&mut doc, k, v)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_value(doc, overrides)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes paths absolute and inlines the manifest.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let abs = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        if let Some(m) = self.manifest.take() {
            let manifest = Manifest::load(&abs(&m))?;
            self.datasets.extend(manifest.datasets);
        }
        let mut inline = Manifest {
            datasets: std::mem::take(&mut self.datasets),
        };
        inline.resolve_paths(base);
        self.datasets = inline.datasets;
        if let Some(c) = &self.checkpoint {
            self.checkpoint = Some(abs(c));
        }
        for m in &mut self.benchmark.models {
            if let Some(c) = &m.checkpoint {
                m.checkpoint = Some(abs(c));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.diffusion.validate()?;
        self.embed.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        Manifest {
            datasets: self.datasets.clone(),
        }
        .validate()?;
        let known = |name: &str| self.datasets.iter().any(|d| d.name == name) || self.manifest.is_some();
        for name in self
            .pretrain_datasets
            .iter()
            .chain(self.target.iter())
            .chain(self.benchmark.datasets.iter())
        {
            if !known(name) {
                return Err(Error::Config(format!("dataset {name:?} is not defined")));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.benchmark.models {
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("benchmark model {:?} listed twice", m.name)));
            }
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetSpec> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("dataset {name:?} is not defined")))
    }

    pub fn target(&self) -> Result<&DatasetSpec> {
        let name = self
            .target
            .as_deref()
            .ok_or_else(|| Error::Config("config has no target dataset".into()))?;
        self.dataset(name)
    }

    /// Explicit pre-training list, or every dataset other than the target.
    pub fn pretrain_corpus(&self) -> Vec<&DatasetSpec> {
        if self.pretrain_datasets.is_empty() {
            self.datasets
                .iter()
                .filter(|d| Some(&d.name) != self.target.as_ref())
                .collect()
        } else {
            self.pretrain_datasets
                .iter()
                .filter_map(|n| self.datasets.iter().find(|d| &d.name == n))
                .collect()
        }
    }
}
