//! Discriminative score, predictive score and context-FID.

pub mod benchmark;
pub mod encoder;
pub mod frechet;
pub mod rnn;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::ts2img::TimeSeries;

pub use encoder::{train_encoder, ContrastiveEncoder, EncoderSpec};
pub use frechet::{fit_gaussian, frechet_distance};
use rnn::{batch_steps, Adam, Gru};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Generated set size; `None` uses the real test-set size.
    pub num_generated: Option<usize>,
    /// Recurrent hidden size; `None` uses `⌈d·T/8⌉` clamped to `[8, 64]`.
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    /// One classifier/predictor fit per entry.
    pub seeds: Vec<u64>,
    pub encoder: EncoderSpec,
    pub jitter: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            num_generated: None,
            hidden: None,
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            train_fraction: 0.8,
            seeds: vec![0, 1, 2],
            encoder: EncoderSpec::default(),
            jitter: 1e-6,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.seeds.is_empty() {
            return Err(Error::Config("evaluation needs epochs, batch_size and seeds".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn hidden_size(&self, len: usize, channels: usize) -> usize {
        self.hidden
            .unwrap_or_else(|| (channels * len).div_ceil(8).clamp(8, 64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub mean: f64,
    pub std: f64,
}

impl Score {
    fn from_runs(runs: &[f64]) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub disc: Score,
    pub pred: Score,
    pub cfid: f64,
}

fn common_shape(real: &[TimeSeries], fake: &[TimeSeries]) -> Result<(usize, usize)> {
    let first = real
        .first()
        .or(fake.first())
        .ok_or_else(|| Error::InsufficientData("no series to evaluate".into()))?;
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InsufficientData("real and generated sets must be non-empty".into()));
    }
    let shape = (first.len(), first.channels());
    if let Some(bad) = real
        .iter()
        .chain(fake)
        .find(|s| (s.len(), s.channels()) != shape)
    {
        return Err(Error::Shape(format!(
            "series shapes differ: {}×{} vs {}×{}",
            shape.0,
            shape.1,
            bad.len(),
            bad.channels()
        )));
    }
    Ok(shape)
}

fn fit_classifier(samples: &[(&Array2<f64>, f64)], proto: &EvalProtocol, hidden: usize, rng: &mut ChaCha8Rng) -> Gru {
    let (len, d) = samples[0].0.dim();
    let mut gru = Gru::new(d, hidden, 1, rng);
    let mut adam = Adam::new(gru.theta.len(), proto.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..proto.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(proto.batch_size) {
            let xs: Vec<&Array2<f64>> = chunk.iter().map(|&i| samples[i].0).collect();
            let cache = gru.forward(batch_steps(&xs, 0..len));
            let logits = gru.readout(&cache.hs[len]);
            let b = chunk.len() as f64;
            let dlogit = Array2::from_shape_fn((chunk.len(), 1), |(k, _)| {
                let p = 1.0 / (1.0 + (-logits[[k, 0]]).exp());
                (p - samples[chunk[k]].1) / b
            });
            let mut d_out = vec![None; len];
            d_out[len - 1] = Some(dlogit);
            let grad = gru.backward(&cache, &d_out);
            adam.step(&mut gru.theta, &grad);
        }
    }
    gru
}

/// One classifier fit: `|0.5 − held-out error|`.
pub fn discriminative_once(
    real: &[TimeSeries],
    fake: &[TimeSeries],
    proto: &EvalProtocol,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (len, d) = common_shape(real, fake)?;
    let split = |set: &[TimeSeries], rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(rng);
        let cut = ((proto.train_fraction * set.len() as f64).round() as usize).clamp(1, set.len().saturating_sub(1).max(1));
        let (a, b) = idx.split_at(cut);
        (a.to_vec(), b.to_vec())
    };
    let (real_tr, real_te) = split(real, rng);
    let (fake_tr, fake_te) = split(fake, rng);
    if real_te.is_empty() || fake_te.is_empty() {
        return Err(Error::InsufficientData("too few series for a held-out split".into()));
    }
    let train: Vec<(&Array2<f64>, f64)> = real_tr
        .iter()
        .map(|&i| (&real[i].values, 1.0))
        .chain(fake_tr.iter().map(|&i| (&fake[i].values, 0.0)))
        .collect();
    let gru = fit_classifier(&train, proto, proto.hidden_size(len, d), rng);
    let test: Vec<(&Array2<f64>, f64)> = real_te
        .iter()
        .map(|&i| (&real[i].values, 1.0))
        .chain(fake_te.iter().map(|&i| (&fake[i].values, 0.0)))
        .collect();
    let mut correct = 0usize;
    for chunk in test.chunks(512) {
        let xs: Vec<&Array2<f64>> = chunk.iter().map(|s| s.0).collect();
        let cache = gru.forward(batch_steps(&xs, 0..len));
        let logits = gru.readout(&cache.hs[len]);
        for (k, (_, label)) in chunk.iter().enumerate() {
            if (logits[[k, 0]] > 0.0) == (*label > 0.5) {
                correct += 1;
            }
        }
    }
    let error = 1.0 - correct as f64 / test.len() as f64;
    Ok((0.5 - error).abs())
}

/// Mean ± std of [`discriminative_once`] over the protocol's seeds.
pub fn discriminative_score(real: &[TimeSeries], fake: &[TimeSeries], proto: &EvalProtocol, seed: u64) -> Result<Score> {
    proto.validate()?;
    let runs: Vec<f64> = proto
        .seeds
        .iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("disc/{s}")));
            discriminative_once(real, fake, proto, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(Score::from_runs(&runs))
}

/// Next-step targets: the last channel at steps `1..T`.
fn targets(samples: &[&Array2<f64>], t: usize) -> Array2<f64> {
    let d = samples[0].ncols();
    Array2::from_shape_fn((samples.len(), 1), |(b, _)| samples[b][[t + 1, d - 1]])
}

/// Train on `fake`, report mean absolute next-step error on `real`.
pub fn predictive_once(
    real: &[TimeSeries],
    fake: &[TimeSeries],
    proto: &EvalProtocol,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (len, d) = common_shape(real, fake)?;
    if len < 2 {
        return Err(Error::Shape("predictive score needs T >= 2".into()));
    }
    let steps = len - 1;
    let mut gru = Gru::new(d, proto.hidden_size(len, d), 1, rng);
    let mut adam = Adam::new(gru.theta.len(), proto.learning_rate);
    let mut order: Vec<usize> = (0..fake.len()).collect();
    for _ in 0..proto.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(proto.batch_size) {
            let xs: Vec<&Array2<f64>> = chunk.iter().map(|&i| &fake[i].values).collect();
            let cache = gru.forward(batch_steps(&xs, 0..steps));
            let scale = 1.0 / (chunk.len() * steps) as f64;
            let d_out: Vec<Option<Array2<f64>>> = (0..steps)
                .map(|t| {
                    let diff = gru.readout(&cache.hs[t + 1]) - targets(&xs, t);
                    Some(diff.mapv(|v| v.signum() * scale))
                })
                .collect();
            let grad = gru.backward(&cache, &d_out);
            adam.step(&mut gru.theta, &grad);
        }
    }
    let mut total = 0.0;
    for chunk in real.chunks(512) {
        let xs: Vec<&Array2<f64>> = chunk.iter().map(|s| &s.values).collect();
        let cache = gru.forward(batch_steps(&xs, 0..steps));
        for t in 0..steps {
            total += (gru.readout(&cache.hs[t + 1]) - targets(&xs, t)).mapv(f64::abs).sum();
        }
    }
    Ok(total / (real.len() * steps) as f64)
}

pub fn predictive_score(real: &[TimeSeries], fake: &[TimeSeries], proto: &EvalProtocol, seed: u64) -> Result<Score> {
    proto.validate()?;
    let runs: Vec<f64> = proto
        .seeds
        .iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("pred/{s}")));
            predictive_once(real, fake, proto, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(Score::from_runs(&runs))
}

/// Embeds a corpus with a trained encoder.
pub fn contrastive_embed(encoder: &ContrastiveEncoder, series: &[TimeSeries]) -> Result<DMatrix<f64>> {
    encoder.embed(series)
}

/// Fréchet distance between Gaussians fitted to the embeddings of both sets.
pub fn context_fid_with(encoder: &ContrastiveEncoder, real: &[TimeSeries], fake: &[TimeSeries], jitter: f64) -> Result<f64> {
    common_shape(real, fake)?;
    let (mu1, s1) = fit_gaussian(&encoder.embed(real)?, jitter)?;
    let (mu2, s2) = fit_gaussian(&encoder.embed(fake)?, jitter)?;
    frechet_distance(&mu1, &s1, &mu2, &s2)
}

/// Trains an encoder on `real` and scores `fake` against it.
pub fn context_fid(real: &[TimeSeries], fake: &[TimeSeries], proto: &EvalProtocol, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cfid/encoder"));
    let encoder = train_encoder(real, &proto.encoder, &mut rng)?;
    context_fid_with(&encoder, real, fake, proto.jitter)
}

/// All three metrics of `fake` against the real test set.
pub fn evaluate(
    real: &[TimeSeries],
    fake: &[TimeSeries],
    encoder: &ContrastiveEncoder,
    proto: &EvalProtocol,
    seed: u64,
) -> Result<MetricReport> {
    let report = MetricReport {
        disc: discriminative_score(real, fake, proto, seed)?,
        pred: predictive_score(real, fake, proto, seed)?,
        cfid: context_fid_with(encoder, real, fake, proto.jitter)?,
    };
    let values = [report.disc.mean, report.disc.std, report.pred.mean, report.pred.std, report.cfid];
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical(format!("metric report out of range: {report:?}")));
    }
    Ok(report)
}
