//! Few-shot benchmark: for every model, dataset and subset, adapt, generate
//! and score against the held-out test split.

use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{subsample, LoadedDataset, SubsetMode, SubsetSpec};
use crate::denoiser::{Checkpoint, Denoiser, ModelConfig};
use crate::diffusion::{generate, DiffusionConfig};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::trainer::{finetune, pretrain, TrainConfig, TrainOutcome};
use crate::ts2img::EmbedConfig;

use super::{evaluate, train_encoder, EvalProtocol, MetricReport};

pub enum ModelInit {
    /// Fine-tune a new token and all weights from this checkpoint.
    Pretrained(Box<Checkpoint>),
    /// Train a fresh model of this shape on the subset alone.
    Scratch(ModelConfig),
}

pub struct BenchModel {
    pub name: String,
    pub init: ModelInit,
}

pub struct BenchSettings {
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub embed: EmbedConfig,
    pub protocol: EvalProtocol,
    pub seed: u64,
    /// Seed for subset selection, shared by every model so they see the same series.
    pub subset_seed: u64,
    /// Where adapted checkpoints are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub dataset: String,
    pub subset: String,
    pub disc_mean: Option<f64>,
    pub disc_std: Option<f64>,
    pub pred_mean: Option<f64>,
    pub pred_std: Option<f64>,
    pub cfid: Option<f64>,
    pub error: String,
}

impl ResultRow {
    fn new(model: &str, dataset: &str, subset: SubsetMode, outcome: Result<MetricReport>) -> Self {
        let mut row = Self {
            model: model.into(),
            dataset: dataset.into(),
            subset: subset.to_string(),
            disc_mean: None,
            disc_std: None,
            pred_mean: None,
            pred_std: None,
            cfid: None,
            error: String::new(),
        };
        match outcome {
            Ok(r) => {
                row.disc_mean = Some(r.disc.mean);
                row.disc_std = Some(r.disc.std);
                row.pred_mean = Some(r.pred.mean);
                row.pred_std = Some(r.pred.std);
                row.cfid = Some(r.cfid);
            }
            Err(e) => row.error = e.to_string(),
        }
        row
    }
}

pub const RESULT_COLUMNS: [&str; 9] = [
    "model",
    "dataset",
    "subset",
    "disc_mean",
    "disc_std",
    "pred_mean",
    "pred_std",
    "cfid",
    "error",
];

/// Adapts one model to one subset.
pub fn adapt(
    model: &BenchModel,
    data: &LoadedDataset,
    subset: SubsetMode,
    settings: &BenchSettings,
) -> Result<TrainOutcome> {
    let spec = SubsetSpec {
        mode: subset,
        seed: settings.subset_seed,
    };
    let cell = format!("{}/{}/{}", model.name, data.name, subset.slug());
    let cfg = TrainConfig {
        seed: derive_seed(settings.seed, &format!("train/{cell}")),
        ..settings.train.clone()
    };
    match &model.init {
        ModelInit::Pretrained(ckpt) => finetune(ckpt, &data.name, &data.train, &spec, &cfg, &settings.diffusion, &settings.embed),
        ModelInit::Scratch(model_cfg) => {
            let chosen = subsample(&data.train, &spec)?;
            let cfg = TrainConfig {
                batch_size: cfg.batch_size.min(chosen.len()),
                ..cfg
            };
            let fresh = Denoiser::new(model_cfg.clone(), DType::F32, derive_seed(settings.seed, &format!("init/{cell}")))?;
            pretrain(&[(data.name.clone(), chosen)], fresh, &cfg, &settings.diffusion, &settings.embed)
        }
    }
}

fn run_cell(
    model: &BenchModel,
    data: &LoadedDataset,
    subset: SubsetMode,
    encoder: &super::ContrastiveEncoder,
    settings: &BenchSettings,
) -> Result<MetricReport> {
    let outcome = adapt(model, data, subset, settings)?;
    if let Some(dir) = &settings.checkpoint_dir {
        let meta = serde_json::json!({"model": model.name, "dataset": data.name, "subset": subset.to_string()});
        outcome
            .to_checkpoint(meta)?
            .save(&dir.join(format!("{}_{}_{}.safetensors", model.name, data.name, subset.slug())))?;
    }
    let sampler = outcome.ema_model()?;
    let token = sampler
        .token(&data.name)
        .ok_or_else(|| Error::Config(format!("no token for {}", data.name)))?;
    let first = data
        .test
        .first()
        .ok_or_else(|| Error::InsufficientData(format!("{} has an empty test split", data.name)))?;
    let count = settings.protocol.num_generated.unwrap_or(data.test.len());
    let cell = format!("{}/{}/{}", model.name, data.name, subset.slug());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &format!("sample/{cell}")));
    let fake = generate(
        &sampler,
        token,
        first.channels(),
        first.len(),
        count,
        &settings.embed,
        &mut rng,
        &settings.diffusion,
    )?;
    evaluate(
        &data.test,
        &fake,
        encoder,
        &settings.protocol,
        derive_seed(settings.seed, &format!("eval/{cell}")),
    )
}

/// Every (model, dataset, subset) cell; failures are recorded in the `error` column.
pub fn run_benchmark(
    models: &[BenchModel],
    datasets: &[LoadedDataset],
    subsets: &[SubsetMode],
    settings: &BenchSettings,
) -> Result<Vec<ResultRow>> {
    settings.protocol.validate()?;
    let mut subsets = subsets.to_vec();
    subsets.sort_by_key(SubsetMode::order_key);
    let mut rows = Vec::new();
    if subsets.is_empty() || models.is_empty() {
        return Ok(rows);
    }
    for data in datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &format!("encoder/{}", data.name)));
        let encoder = train_encoder(&data.train, &settings.protocol.encoder, &mut rng);
        for model in models {
            for &subset in &subsets {
                log::info!("benchmark {} / {} / {}", model.name, data.name, subset);
                let outcome = match &encoder {
                    Ok(enc) => run_cell(model, data, subset, enc, settings),
                    Err(e) => Err(Error::InsufficientData(format!("context encoder: {e}"))),
                };
                if let Err(e) = &outcome {
                    log::warn!("cell {} / {} / {} failed: {e}", model.name, data.name, subset);
                }
                rows.push(ResultRow::new(&model.name, &data.name, subset, outcome));
            }
        }
    }
    Ok(rows)
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(RESULT_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULT_COLUMNS {
        return Err(Error::Schema(format!(
            "{}: expected columns {:?}, found {:?}",
            path.display(),
            RESULT_COLUMNS,
            header
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Schema(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_summary_json(rows: &[ResultRow], path: &Path) -> Result<()> {
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    let summary = serde_json::json!({
        "cells": rows.len(),
        "failed": failed,
        "results": rows,
    });
    std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
