//! Multi-domain pre-training and few-shot fine-tuning with an EMA shadow.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{backprop::GradStore, DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{subsample, SubsetSpec};
use crate::denoiser::{Checkpoint, DatasetToken, Denoiser};
use crate::diffusion::{training_loss, DiffusionConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::seed::derive_seed;
use crate::ts2img::{delay_embed, EmbedConfig, ImageTensor, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Every series equally likely, so datasets appear in proportion to their size.
    #[default]
    Proportional,
    /// Pick a dataset uniformly, then a series within it.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mixing: Mixing,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Train every sample with the null token.
    pub unconditional: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            ema_decay: 0.9999,
            epochs: 1000,
            batch_size: 2048,
            seed: 0,
            mixing: Mixing::Proportional,
            grad_clip: 1.0,
            unconditional: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config(
                "need batch_size >= 1, weight_decay >= 0, grad_clip >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Exponential moving average of every parameter in a store.
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64) -> Result<Self> {
        Ok(Self {
            decay,
            shadow: store.snapshot()?,
        })
    }

    /// `θ̄ ← d·θ̄ + (1 − d)·θ`; parameters added since the last call start from their current value.
    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            let current = var.as_tensor().detach();
            let next = match self.shadow.get(name) {
                Some(prev) => ((prev * self.decay)? + (current * (1.0 - self.decay))?)?.detach(),
                None => current.copy()?.detach(),
            };
            self.shadow.insert(name.to_string(), next);
        }
        Ok(())
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    pub fn into_shadow(self) -> BTreeMap<String, Tensor> {
        self.shadow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub sigma_mean: f64,
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: Denoiser,
    pub ema: BTreeMap<String, Tensor>,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Result<Checkpoint> {
        self.model.to_checkpoint(Some(self.ema.clone()), metadata)
    }

    /// A model carrying the EMA weights, for sampling.
    pub fn ema_model(&self) -> Result<Denoiser> {
        let ckpt = self.to_checkpoint(serde_json::Value::Null)?;
        Denoiser::from_checkpoint(&ckpt, true, self.model.dtype())
    }
}

/// One training series together with its image and conditioning token.
struct Example {
    image: ImageTensor,
    token: DatasetToken,
}

fn global_norm(grads: &GradStore, store: &ParamStore) -> Result<f64> {
    let mut sq = 0.0;
    for var in store.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

fn clip_gradients(grads: &mut GradStore, store: &ParamStore, max_norm: f64) -> Result<()> {
    if max_norm <= 0.0 {
        return Ok(());
    }
    let norm = global_norm(grads, store)?;
    if norm > max_norm {
        let scale = max_norm / norm;
        for var in store.vars() {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(())
}

/// Runs `epochs · ⌈N / batch⌉` optimiser steps over `groups` (one per dataset).
fn run(
    model: Denoiser,
    groups: Vec<Vec<Example>>,
    batch_size: usize,
    cfg: &TrainConfig,
    diffusion: &DiffusionConfig,
    rng_label: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    diffusion.validate()?;
    let total: usize = groups.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InsufficientData("nothing to train on".into()));
    }
    let flat: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, xs)| (0..xs.len()).map(move |i| (g, i)))
        .collect();
    let steps_per_epoch = total.div_ceil(batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, rng_label));

    let mut opt = AdamW::new(
        model.store().vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut ema = Ema::new(model.store(), cfg.ema_decay)?;

    let mut log = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order: Vec<(usize, usize)> = match cfg.mixing {
            Mixing::Proportional => {
                let mut o = flat.clone();
                o.shuffle(&mut rng);
                o
            }
            Mixing::Uniform => {
                let live: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].is_empty()).collect();
                (0..total)
                    .map(|_| {
                        let g = live[rng.random_range(0..live.len())];
                        (g, rng.random_range(0..groups[g].len()))
                    })
                    .collect()
            }
        };
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&ImageTensor, DatasetToken)> = chunk
                .iter()
                .map(|&(g, i)| {
                    let ex = &groups[g][i];
                    (&ex.image, ex.token)
                })
                .collect();
            let out = training_loss(&batch, &model, &mut rng, diffusion)?;
            let loss: f64 = out.loss.to_dtype(DType::F64)?.to_scalar()?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            let mut grads = out.loss.backward()?;
            clip_gradients(&mut grads, model.store(), cfg.grad_clip)?;
            opt.step(&grads)?;
            ema.update(model.store())?;
            let sigma_mean = out.sigmas.iter().sum::<f64>() / out.sigmas.len() as f64;
            log.push(LogRow {
                step,
                loss,
                lr: cfg.learning_rate,
                sigma_mean,
            });
            if step % 100 == 0 {
                log::debug!("step {step}: loss {loss:.5}");
            }
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        ema: ema.into_shadow(),
        log,
    })
}

fn embed_all(series: &[TimeSeries], token: DatasetToken, embed: &EmbedConfig) -> Result<Vec<Example>> {
    series
        .iter()
        .map(|s| {
            Ok(Example {
                image: delay_embed(s, embed)?,
                token,
            })
        })
        .collect()
}

/// Trains on a named multi-dataset corpus. Datasets without a token get one.
pub fn pretrain(
    corpus: &[(String, Vec<TimeSeries>)],
    mut model: Denoiser,
    cfg: &TrainConfig,
    diffusion: &DiffusionConfig,
    embed: &EmbedConfig,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty pre-training corpus".into()));
    }
    let mut groups = Vec::with_capacity(corpus.len());
    for (name, series) in corpus {
        let token = match model.token(name) {
            Some(t) => t,
            None => model.register_token(name, derive_seed(cfg.seed, &format!("token/{name}")))?,
        };
        let token = if cfg.unconditional { DatasetToken::Null } else { token };
        groups.push(embed_all(series, token, embed)?);
    }
    run(model, groups, cfg.batch_size, cfg, diffusion, "pretrain")
}

/// Few-shot adaptation: a fresh token for `name`, full fine-tuning on the chosen subset
/// with batch `min(batch_size, N)`. Training starts from the checkpoint's EMA weights when present.
pub fn finetune(
    ckpt: &Checkpoint,
    name: &str,
    train: &[TimeSeries],
    subset: &SubsetSpec,
    cfg: &TrainConfig,
    diffusion: &DiffusionConfig,
    embed: &EmbedConfig,
) -> Result<TrainOutcome> {
    if ckpt.registry.get(name).is_some() {
        return Err(Error::TokenCollision(name.to_string()));
    }
    let chosen = subsample(train, subset)?;
    let mut model = Denoiser::from_checkpoint(ckpt, ckpt.ema.is_some(), DType::F32)?;
    let token = model.register_token(name, derive_seed(cfg.seed, &format!("token/{name}")))?;
    let token = if cfg.unconditional { DatasetToken::Null } else { token };
    let batch = cfg.batch_size.min(chosen.len());
    let groups = vec![embed_all(&chosen, token, embed)?];
    run(model, groups, batch, cfg, diffusion, "finetune")
}

/// EMA weights stored in a checkpoint.
pub fn ema_swap(ckpt: &Checkpoint) -> Result<&BTreeMap<String, Tensor>> {
    ckpt.ema_swap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sine, SubsetMode};
    use crate::denoiser::{ChannelAdapter, ModelConfig, SizeVariant};
    use candle_core::Device;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![],
            num_res_blocks: 1,
            image_side: 8,
            size_variant: SizeVariant::Custom,
            adapter: ChannelAdapter::DyConv {
                kernel: 3,
                in_ref: 8,
                out_ref: 8,
            },
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-3,
            ema_decay: 0.9,
            epochs: 2,
            batch_size: 16,
            seed: 3,
            ..Default::default()
        }
    }

    fn corpus(seed: u64) -> Vec<(String, Vec<TimeSeries>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            ("a".into(), generate_sine(20, 24, 2, &mut rng)),
            ("b".into(), generate_sine(12, 24, 3, &mut rng)),
        ]
    }

    #[test]
    fn ema_closed_form() {
        let mut store = ParamStore::new(DType::F64);
        let p = store.insert("p".into(), Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let d = 0.7;
        let mut ema = Ema::new(&store, d).unwrap();
        let thetas = [2.0, -1.0, 0.5, 3.0, 4.0];
        let var = store.get("p").unwrap().clone();
        for &t in &thetas {
            var.set(&Tensor::new(&[t], &Device::Cpu).unwrap()).unwrap();
            ema.update(&store).unwrap();
        }
        let k = thetas.len();
        let mut expected = d.powi(k as i32) * 1.0;
        for (j, &t) in thetas.iter().enumerate() {
            expected += d.powi((k - 1 - j) as i32) * (1.0 - d) * t;
        }
        let got: Vec<f64> = ema.shadow()["p"].to_vec1().unwrap();
        assert!((got[0] - expected).abs() < 1e-10);
        drop(p);

        let mut zero = Ema::new(&store, 0.0).unwrap();
        var.set(&Tensor::new(&[9.0f64], &Device::Cpu).unwrap()).unwrap();
        zero.update(&store).unwrap();
        assert_eq!(zero.shadow()["p"].to_vec1::<f64>().unwrap(), vec![9.0]);
    }

    fn bytes(out: &TrainOutcome) -> Vec<u8> {
        out.to_checkpoint(serde_json::json!({})).unwrap().to_bytes().unwrap()
    }

    #[test]
    fn pretraining_is_deterministic() {
        let embed = EmbedConfig::default();
        let diff = DiffusionConfig::default();
        let a = pretrain(&corpus(1), Denoiser::new(small_cfg(), DType::F32, 5).unwrap(), &quick(), &diff, &embed).unwrap();
        let b = pretrain(&corpus(1), Denoiser::new(small_cfg(), DType::F32, 5).unwrap(), &quick(), &diff, &embed).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(bytes(&a), bytes(&b));
        // 32 series, batch 16, 2 epochs
        assert_eq!(a.log.len(), 4);
        assert!(a.model.token("a").is_some() && a.model.token("b").is_some());
    }

    #[test]
    fn finetune_leaves_other_tokens_alone() {
        let embed = EmbedConfig::default();
        let diff = DiffusionConfig::default();
        let pre = pretrain(&corpus(1), Denoiser::new(small_cfg(), DType::F32, 5).unwrap(), &quick(), &diff, &embed).unwrap();
        let ckpt = pre.to_checkpoint(serde_json::json!({})).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = generate_sine(30, 24, 4, &mut rng);
        let subset = SubsetSpec {
            mode: SubsetMode::FixedCount(10),
            seed: 1,
        };
        let ft = finetune(&ckpt, "new", &target, &subset, &quick(), &diff, &embed).unwrap();
        // N = 10 → batch 10 → one step per epoch
        assert_eq!(ft.log.len(), 2);
        let ema = ckpt.ema_swap().unwrap();
        for name in ["token.0", "token.1"] {
            let before: Vec<f32> = ema[name].to_vec1().unwrap();
            let after: Vec<f32> = ft.model.store().get(name).unwrap().to_vec1().unwrap();
            assert_eq!(before, after, "{name}");
        }
        let new_tok = ft.model.store().get("token.2").unwrap().to_vec1::<f32>().unwrap();
        assert!(new_tok.iter().all(|v| v.is_finite()));

        assert!(matches!(
            finetune(&ckpt, "a", &target, &subset, &quick(), &diff, &embed),
            Err(Error::TokenCollision(_))
        ));
    }

    #[test]
    fn loss_decreases_on_sine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = vec![("s".to_string(), generate_sine(64, 24, 2, &mut rng))];
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            epochs: 50,
            batch_size: 32,
            ..quick()
        };
        let diff = DiffusionConfig::default();
        let out = pretrain(&data, Denoiser::new(small_cfg(), DType::F32, 1).unwrap(), &cfg, &diff, &EmbedConfig::default()).unwrap();
        let head: f64 = out.log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let n = out.log.len();
        let tail: f64 = out.log[n - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(tail < 0.7 * head, "{head} → {tail}");
    }

    #[test]
    fn log_is_written_as_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![LogRow { step: 0, loss: 1.5, lr: 1e-4, sigma_mean: 0.3 }];
        write_log(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,loss,lr,sigma_mean");
    }
}
