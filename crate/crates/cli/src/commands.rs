use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fewgen_core::config::ExperimentConfig;
use fewgen_core::data::{load_dataset, LoadedDataset};
use fewgen_core::denoiser::{Checkpoint, DatasetToken, Denoiser};
use fewgen_core::diffusion::generate;
use fewgen_core::metrics::benchmark::{
    run_benchmark, write_results_csv, write_summary_json, BenchModel, BenchSettings, ModelInit, ResultRow,
};
use fewgen_core::metrics::{evaluate as score, train_encoder};
use fewgen_core::seed::derive_seed;
use fewgen_core::trainer::{self, write_log};
use fewgen_core::ts2img::TimeSeries;
use fewgen_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::CommonArgs;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const MODEL_FILE: &str = "model.safetensors";
pub const TRAIN_LOG: &str = "train_log.csv";

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Loads the config with flags applied, creates the output directory and
/// writes the resolved config next to the results.
fn setup(args: &CommonArgs) -> Result<Run> {
    let mut overrides = Vec::new();
    if let Some(s) = args.seed {
        for key in ["seed", "pretrain.seed", "finetune.seed"] {
            overrides.push(format!("{key}={s}"));
        }
    }
    overrides.extend(args.overrides.iter().cloned());
    let cwd = std::env::current_dir()?;
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => {
            let mut cfg = ExperimentConfig::from_value(json!({}), &overrides)?;
            cfg.resolve_paths(&cwd)?;
            cfg
        }
    };
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = Some(cwd.join(c));
    }
    if let Some(s) = &args.subset {
        cfg.subset.mode = s.parse()?;
    }
    cfg.validate()?;
    fs::create_dir_all(&args.output_dir)
        .with_context(|| format!("cannot create {}", args.output_dir.display()))?;
    let run = Run {
        cfg,
        out: args.output_dir.clone(),
    };
    fs::write(run.path(RESOLVED_CONFIG), serde_json::to_string_pretty(&run.cfg)? + "\n")?;
    Ok(run)
}

fn load_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or config `checkpoint`)".into()))?;
    Ok(Checkpoint::load(path)?)
}

fn is_unconditional(ckpt: &Checkpoint) -> bool {
    ckpt.metadata.get("unconditional").and_then(|v| v.as_bool()) == Some(true)
}

fn token_for(model: &Denoiser, ckpt: &Checkpoint, name: &str) -> Result<DatasetToken> {
    if is_unconditional(ckpt) {
        return Ok(DatasetToken::Null);
    }
    model
        .token(name)
        .ok_or_else(|| Error::Config(format!("checkpoint has no token for dataset {name:?}")).into())
}

pub fn pretrain(args: &CommonArgs) -> Result<()> {
    let run = setup(args)?;
    let cfg = &run.cfg;
    let specs = cfg.pretrain_corpus();
    if specs.is_empty() {
        return Err(Error::InsufficientData("no datasets in the pre-training corpus".into()).into());
    }
    let mut corpus = Vec::with_capacity(specs.len());
    for spec in specs {
        let data = load_dataset(spec)?;
        log::info!("{}: {} train series", data.name, data.train.len());
        corpus.push((data.name, data.train));
    }
    let model = Denoiser::new(cfg.model.clone(), candle_dtype(), derive_seed(cfg.seed, "init"))?;
    log::info!("model has {} parameters", model.num_parameters());
    let names: Vec<&str> = corpus.iter().map(|(n, _)| n.as_str()).collect();
    let meta = json!({"command": "pretrain", "datasets": names, "unconditional": cfg.pretrain.unconditional});
    let outcome = trainer::pretrain(&corpus, model, &cfg.pretrain, &cfg.diffusion, &cfg.embed)?;
    write_log(&outcome.log, &run.path(TRAIN_LOG))?;
    outcome.to_checkpoint(meta)?.save(&run.path(MODEL_FILE))?;
    log::info!("wrote {}", run.path(MODEL_FILE).display());
    Ok(())
}

pub fn finetune(args: &CommonArgs) -> Result<()> {
    let run = setup(args)?;
    let cfg = &run.cfg;
    let ckpt = load_checkpoint(cfg)?;
    let data = load_dataset(cfg.target()?)?;
    let outcome = trainer::finetune(
        &ckpt,
        &data.name,
        &data.train,
        &cfg.subset,
        &cfg.finetune,
        &cfg.diffusion,
        &cfg.embed,
    )?;
    let meta = json!({
        "command": "finetune",
        "dataset": data.name,
        "subset": cfg.subset.mode.to_string(),
        "unconditional": cfg.finetune.unconditional,
    });
    write_log(&outcome.log, &run.path(TRAIN_LOG))?;
    outcome.to_checkpoint(meta)?.save(&run.path(MODEL_FILE))?;
    log::info!("wrote {}", run.path(MODEL_FILE).display());
    Ok(())
}

fn sampling_model(args: &CommonArgs, ckpt: &Checkpoint) -> Result<Denoiser> {
    Ok(Denoiser::from_checkpoint(ckpt, !args.no_ema, candle_dtype())?)
}

fn candle_dtype() -> fewgen_core::DType {
    fewgen_core::DType::F32
}

pub fn sample(args: &CommonArgs) -> Result<()> {
    let run = setup(args)?;
    let cfg = &run.cfg;
    let ckpt = load_checkpoint(cfg)?;
    let model = sampling_model(args, &ckpt)?;
    let spec = cfg.target()?;
    let token = token_for(&model, &ckpt, &spec.name)?;
    let len = args.length.unwrap_or(spec.length);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sample"));
    let mut series = generate(
        &model,
        token,
        spec.channels,
        len,
        cfg.num_samples,
        &cfg.embed,
        &mut rng,
        &cfg.diffusion,
    )?;
    let stats = load_dataset(spec)?.stats;
    for s in &mut series {
        stats.invert(s);
    }
    write_series_csv(&series, &run.path("samples.csv"))?;
    log::info!("wrote {} series of length {len}", series.len());
    Ok(())
}

/// Long format: one row per (sample, step) with one column per channel.
fn write_series_csv(series: &[TimeSeries], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let channels = series.first().map_or(0, TimeSeries::channels);
    let mut header = vec!["sample".to_string(), "t".to_string()];
    header.extend((0..channels).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for (i, s) in series.iter().enumerate() {
        for t in 0..s.len() {
            let mut rec = vec![i.to_string(), t.to_string()];
            rec.extend(s.values.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn encoder_for(cfg: &ExperimentConfig, data: &LoadedDataset) -> Result<fewgen_core::metrics::ContrastiveEncoder> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("encoder/{}", data.name)));
    Ok(train_encoder(&data.train, &cfg.eval.encoder, &mut rng)?)
}

pub fn evaluate(args: &CommonArgs) -> Result<()> {
    let run = setup(args)?;
    let cfg = &run.cfg;
    let ckpt = load_checkpoint(cfg)?;
    let model = sampling_model(args, &ckpt)?;
    let data = load_dataset(cfg.target()?)?;
    let Some(first) = data.test.first() else {
        bail!(Error::InsufficientData(format!("{} has an empty test split", data.name)));
    };
    let token = token_for(&model, &ckpt, &data.name)?;
    let count = cfg.eval.num_generated.unwrap_or(data.test.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sample"));
    let fake = generate(
        &model,
        token,
        first.channels(),
        first.len(),
        count,
        &cfg.embed,
        &mut rng,
        &cfg.diffusion,
    )?;
    let encoder = encoder_for(cfg, &data)?;
    let report = score(&data.test, &fake, &encoder, &cfg.eval, derive_seed(cfg.seed, "eval"))?;
    let name = cfg
        .checkpoint
        .as_deref()
        .and_then(Path::file_stem)
        .map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let row = ResultRow {
        model: name,
        dataset: data.name.clone(),
        subset: ckpt
            .metadata
            .get("subset")
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string(),
        disc_mean: Some(report.disc.mean),
        disc_std: Some(report.disc.std),
        pred_mean: Some(report.pred.mean),
        pred_std: Some(report.pred.std),
        cfid: Some(report.cfid),
        error: String::new(),
    };
    let rows = [row];
    write_results_csv(&rows, &run.path("results.csv"))?;
    write_summary_json(&rows, &run.path("summary.json"))?;
    println!(
        "disc {:.4} ± {:.4}  pred {:.4} ± {:.4}  cfid {:.4}",
        report.disc.mean, report.disc.std, report.pred.mean, report.pred.std, report.cfid
    );
    Ok(())
}

pub fn benchmark(args: &CommonArgs) -> Result<()> {
    let run = setup(args)?;
    let cfg = &run.cfg;
    let mut specs = cfg.benchmark.models.clone();
    if specs.is_empty() {
        if let Some(c) = &cfg.checkpoint {
            specs.push(fewgen_core::config::BenchModelSpec {
                name: "pretrained".into(),
                checkpoint: Some(c.clone()),
            });
        }
        specs.push(fewgen_core::config::BenchModelSpec {
            name: "scratch".into(),
            checkpoint: None,
        });
    }
    let mut models = Vec::with_capacity(specs.len());
    for spec in specs {
        let init = match &spec.checkpoint {
            Some(p) => ModelInit::Pretrained(Box::new(
                Checkpoint::load(p).with_context(|| format!("model {}", spec.name))?,
            )),
            None => ModelInit::Scratch(cfg.model.clone()),
        };
        models.push(BenchModel { name: spec.name, init });
    }
    let names = if cfg.benchmark.datasets.is_empty() {
        vec![cfg.target()?.name.clone()]
    } else {
        cfg.benchmark.datasets.clone()
    };
    let mut datasets = Vec::with_capacity(names.len());
    for name in &names {
        datasets.push(load_dataset(cfg.dataset(name)?)?);
    }
    let ckpt_dir = run.path("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let settings = BenchSettings {
        train: cfg.finetune.clone(),
        diffusion: cfg.diffusion.clone(),
        embed: cfg.embed,
        protocol: cfg.eval.clone(),
        seed: cfg.seed,
        subset_seed: cfg.subset.seed,
        checkpoint_dir: Some(ckpt_dir),
    };
    let rows = run_benchmark(&models, &datasets, &cfg.benchmark.subsets, &settings)?;
    let csv_path = run.path("results.csv");
    write_results_csv(&rows, &csv_path)?;
    write_summary_json(&rows, &run.path("summary.json"))?;
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    log::info!("{} cells, {failed} failed", rows.len());
    crate::plots::emit_plots(&csv_path, &run.out)?;
    Ok(())
}

pub fn profile(args: &CommonArgs) -> Result<()> {
    let run = setup(args)?;
    let cfg = &run.cfg;
    let channels = if args.channels.is_empty() {
        vec![16, 32, 64, 128]
    } else {
        args.channels.clone()
    };
    let data_channels = cfg.target().map_or(1, |s| s.channels);
    let report = crate::profile::run(&cfg.model, data_channels, &channels, &run.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// One-line JSON report for a failed command.
pub fn error_report(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or("RuntimeError", Error::kind);
    json!({"status": "error", "kind": kind, "message": format!("{e:#}")}).to_string()
}
