//! EDM preconditioning, log-normal noise levels, the masked denoising loss and
//! the deterministic Heun sampler.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DatasetToken, Denoiser};
use crate::error::{Error, Result};
use crate::nn::randn;
use crate::ts2img::{build_mask, inverse_delay_embed, EmbedConfig, ImageTensor, TimeSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub num_steps: usize,
    pub rho: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            sigma_min: 0.002,
            sigma_max: 80.0,
            p_mean: -1.2,
            p_std: 1.2,
            num_steps: 36,
            rho: 7.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max (got {} / {})",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.sigma_data <= 0.0 || self.num_steps == 0 || self.p_std < 0.0 || self.rho <= 0.0 {
            return Err(Error::Config(
                "need sigma_data > 0, num_steps >= 1, p_std >= 0, rho > 0".into(),
            ));
        }
        Ok(())
    }

    /// `σ_0 = σ_max > … > σ_{N−1} = σ_min`, followed by a terminal 0.
    pub fn sigma_grid(&self) -> Vec<f64> {
        let n = self.num_steps;
        let (hi, lo) = (self.sigma_max.powf(1.0 / self.rho), self.sigma_min.powf(1.0 / self.rho));
        let mut grid: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    self.sigma_max
                } else if i == n - 1 {
                    self.sigma_min
                } else {
                    (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(self.rho)
                }
            })
            .collect();
        grid.push(0.0);
        grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_in: f64,
    pub c_out: f64,
    pub c_noise: f64,
    /// Loss weight `λ(σ)`.
    pub weight: f64,
}

pub fn precondition_coeffs(sigma: f64, cfg: &DiffusionConfig) -> Result<Preconditioning> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("noise level must be positive, got {sigma}")));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let total = sigma * sigma + sd2;
    Ok(Preconditioning {
        c_skip: sd2 / total,
        c_in: 1.0 / total.sqrt(),
        c_out: sigma * cfg.sigma_data / total.sqrt(),
        c_noise: sigma.ln() / 4.0,
        weight: total / (sigma * cfg.sigma_data).powi(2),
    })
}

pub fn sample_sigma<R: Rng>(rng: &mut R, cfg: &DiffusionConfig) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (cfg.p_mean + cfg.p_std * z).exp()
}

/// A full denoiser `Γ(x; σ)` on `[B, C, n, n]` batches sharing one `σ`.
pub trait Denoise {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// Wraps the network in EDM preconditioning for one conditioning token.
pub struct Preconditioned<'a> {
    pub model: &'a Denoiser,
    pub token: DatasetToken,
    pub channels: usize,
    pub cfg: &'a DiffusionConfig,
}

impl Denoise for Preconditioned<'_> {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let p = precondition_coeffs(sigma, self.cfg)?;
        let batch = x.dim(0)?;
        let x = x.to_dtype(self.model.dtype())?;
        let c_noise = Tensor::full(p.c_noise, batch, self.model.device())?.to_dtype(self.model.dtype())?;
        let tokens = vec![self.token; batch];
        let net = self.model.forward(&(&x * p.c_in)?, &c_noise, &tokens, self.channels)?;
        Ok(((&x * p.c_skip)? + (net * p.c_out)?)?)
    }
}

/// Everything a loss-side denoiser sees for one channel-homogeneous group.
pub struct LossGroup<'a> {
    /// `[G, C, n, n]`, already masked.
    pub noisy: &'a Tensor,
    /// `[G, C, n, n]`; exposed for oracle denoisers in tests.
    pub clean: &'a Tensor,
    pub sigmas: &'a [f64],
    pub tokens: &'a [DatasetToken],
    pub channels: usize,
}

/// Preconditioned network output `Γ_θ` for a loss group with per-sample `σ`.
pub fn preconditioned_output(model: &Denoiser, group: &LossGroup<'_>, cfg: &DiffusionConfig) -> Result<Tensor> {
    let dtype = model.dtype();
    let device = model.device();
    let coeffs: Vec<Preconditioning> = group
        .sigmas
        .iter()
        .map(|&s| precondition_coeffs(s, cfg))
        .collect::<Result<_>>()?;
    let g = coeffs.len();
    let col = |f: fn(&Preconditioning) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = coeffs.iter().map(f).collect();
        Ok(Tensor::from_vec(v, (g, 1, 1, 1), device)?.to_dtype(dtype)?)
    };
    let c_in = col(|p| p.c_in)?;
    let c_skip = col(|p| p.c_skip)?;
    let c_out = col(|p| p.c_out)?;
    let c_noise: Vec<f64> = coeffs.iter().map(|p| p.c_noise).collect();
    let c_noise = Tensor::from_vec(c_noise, g, device)?.to_dtype(dtype)?;
    let net = model.forward(&group.noisy.broadcast_mul(&c_in)?, &c_noise, group.tokens, group.channels)?;
    Ok((group.noisy.broadcast_mul(&c_skip)? + net.broadcast_mul(&c_out)?)?)
}

/// Stacks images into `[G, C, n, n]` pixels and a `[G, 1, n, n]` mask.
pub fn stack_images(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty image list".into()))?;
    let (c, n) = (first.channels(), first.side());
    let mut pix = Vec::with_capacity(images.len() * c * n * n);
    let mut mask = Vec::with_capacity(images.len() * n * n);
    for img in images {
        if img.channels() != c || img.side() != n {
            return Err(Error::Shape(format!(
                "cannot stack {}×{n} with {}×{}",
                c,
                img.channels(),
                img.side()
            )));
        }
        pix.extend(img.pixels.iter().copied());
        mask.extend(img.valid_mask.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    }
    let g = images.len();
    Ok((
        Tensor::from_vec(pix, (g, c, n, n), device)?.to_dtype(dtype)?,
        Tensor::from_vec(mask, (g, 1, n, n), device)?.to_dtype(dtype)?,
    ))
}

/// Scalar loss plus the per-sample noise levels it was drawn with.
#[derive(Debug, Clone)]
pub struct DenoisingLoss {
    pub loss: Tensor,
    pub sigmas: Vec<f64>,
}

/// Masked EDM loss with a caller-supplied `Γ`.
///
/// Each sample contributes `λ(σ)·‖mask ⊙ (Γ − x⁰)‖² / (C · valid pixels)` and
/// the result is averaged over the batch. Noise is drawn per sample in batch
/// order, then the batch is split into groups of equal channel count.
pub fn masked_denoising_loss<R, F>(
    batch: &[(&ImageTensor, DatasetToken)],
    rng: &mut R,
    cfg: &DiffusionConfig,
    dtype: DType,
    device: &Device,
    mut denoise: F,
) -> Result<DenoisingLoss>
where
    R: Rng,
    F: FnMut(&LossGroup<'_>) -> Result<Tensor>,
{
    if batch.is_empty() {
        return Err(Error::Shape("empty training batch".into()));
    }
    let side = batch[0].0.side();
    if batch.iter().any(|(img, _)| img.side() != side) {
        return Err(Error::Shape("batch images differ in spatial side".into()));
    }
    let sigmas: Vec<f64> = batch.iter().map(|_| sample_sigma(rng, cfg)).collect();
    let noise: Vec<Array3<f64>> = batch
        .iter()
        .map(|(img, _)| {
            let (c, h, w) = img.pixels.dim();
            Array3::from_shape_simple_fn((c, h, w), || StandardNormal.sample(rng))
        })
        .collect();

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (img, _)) in batch.iter().enumerate() {
        groups.entry(img.channels()).or_default().push(i);
    }

    let mut total: Option<Tensor> = None;
    for (&channels, idx) in &groups {
        let images: Vec<&ImageTensor> = idx.iter().map(|&i| batch[i].0).collect();
        let (clean, mask) = stack_images(&images, dtype, device)?;
        let g = idx.len();
        let mut eps = Vec::with_capacity(g * channels * side * side);
        for &i in idx {
            eps.extend(noise[i].iter().map(|z| z * sigmas[i]));
        }
        let eps = Tensor::from_vec(eps, clean.dims(), device)?.to_dtype(dtype)?;
        let noisy = (&clean + eps)?.broadcast_mul(&mask)?;
        let group_sigmas: Vec<f64> = idx.iter().map(|&i| sigmas[i]).collect();
        let tokens: Vec<DatasetToken> = idx.iter().map(|&i| batch[i].1).collect();

        let out = denoise(&LossGroup {
            noisy: &noisy,
            clean: &clean,
            sigmas: &group_sigmas,
            tokens: &tokens,
            channels,
        })?;
        let sq = (out - &clean)?.sqr()?.broadcast_mul(&mask)?;
        let per_sample = sq.flatten_from(1)?.sum(1)?;
        let scale: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let valid = batch[i].0.valid_count() * channels;
                let w = precondition_coeffs(sigmas[i], cfg).map(|p| p.weight).unwrap_or(0.0);
                w / valid.max(1) as f64
            })
            .collect();
        let scale = Tensor::from_vec(scale, g, device)?.to_dtype(dtype)?;
        let group_loss = (per_sample * scale)?.sum_all()?;
        total = Some(match total {
            Some(t) => (t + group_loss)?,
            None => group_loss,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("empty training batch".into()))?;
    Ok(DenoisingLoss {
        loss: (total / batch.len() as f64)?,
        sigmas,
    })
}

/// Masked EDM training loss for the network; differentiable w.r.t. its parameters.
pub fn training_loss<R: Rng>(
    batch: &[(&ImageTensor, DatasetToken)],
    model: &Denoiser,
    rng: &mut R,
    cfg: &DiffusionConfig,
) -> Result<DenoisingLoss> {
    masked_denoising_loss(batch, rng, cfg, model.dtype(), model.device(), |group| {
        preconditioned_output(model, group, cfg)
    })
}

/// Deterministic Heun integration of the probability-flow ODE on
/// `[count, channels, n, n]`, pinning invalid pixels to zero after every step.
pub fn sample_images<D: Denoise, R: Rng>(
    denoiser: &D,
    count: usize,
    channels: usize,
    mask: &ndarray::Array2<bool>,
    rng: &mut R,
    cfg: &DiffusionConfig,
    dtype: DType,
) -> Result<Tensor> {
    cfg.validate()?;
    let device = Device::Cpu;
    let (h, w) = mask.dim();
    let mask_vals: Vec<f64> = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask_vals, (1, 1, h, w), &device)?.to_dtype(dtype)?;
    let grid = cfg.sigma_grid();

    let mut x = (randn(rng, &[count, channels, h, w], dtype, &device)? * grid[0])?.broadcast_mul(&mask)?;
    for (i, pair) in grid.windows(2).enumerate() {
        let (t_cur, t_next) = (pair[0], pair[1]);
        let d_cur = ((&x - denoiser.denoise(&x, t_cur)?)? / t_cur)?;
        let mut x_next = (&x + (&d_cur * (t_next - t_cur))?)?;
        if t_next > 0.0 {
            let d_next = ((&x_next - denoiser.denoise(&x_next, t_next)?)? / t_next)?;
            x_next = (&x + ((d_cur + d_next)? * (0.5 * (t_next - t_cur)))?)?;
        }
        x = x_next.broadcast_mul(&mask)?.detach();
        let check: f64 = x.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar()?;
        if !check.is_finite() {
            return Err(Error::Sampling(format!("non-finite state after step {i} (σ={t_next})")));
        }
    }
    Ok(x)
}

/// Generates `count` series of length `len` with `channels` channels.
#[allow(clippy::too_many_arguments)]
pub fn sample_series<D: Denoise, R: Rng>(
    denoiser: &D,
    count: usize,
    channels: usize,
    len: usize,
    embed: &EmbedConfig,
    rng: &mut R,
    cfg: &DiffusionConfig,
    dtype: DType,
) -> Result<Vec<TimeSeries>> {
    let mask = build_mask(len, channels, embed)?;
    let layout = embed.layout(len)?;
    let images = sample_images(denoiser, count, channels, &mask, rng, cfg, dtype)?;
    let n = embed.window;
    let flat: Vec<f64> = images.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let per = channels * n * n;
    flat.chunks_exact(per)
        .map(|chunk| {
            let img = ImageTensor {
                pixels: Array3::from_shape_vec((channels, n, n), chunk.to_vec())
                    .map_err(|e| Error::Shape(e.to_string()))?,
                valid_mask: mask.clone(),
                effective_length: layout.effective_length,
                source_length: len,
            };
            let mut series = inverse_delay_embed(&img, embed, len)?;
            series.dataset_id = "generated".into();
            Ok(series)
        })
        .collect()
}

/// `count` series from the network for `token`, generated in batches of at most 256.
#[allow(clippy::too_many_arguments)]
pub fn generate<R: Rng>(
    model: &Denoiser,
    token: DatasetToken,
    channels: usize,
    len: usize,
    count: usize,
    embed: &EmbedConfig,
    rng: &mut R,
    cfg: &DiffusionConfig,
) -> Result<Vec<TimeSeries>> {
    let den = Preconditioned {
        model,
        token,
        channels,
        cfg,
    };
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = (count - out.len()).min(256);
        out.extend(sample_series(&den, n, channels, len, embed, rng, cfg, model.dtype())?);
    }
    Ok(out)
}

/// One generated series from the network for `token`.
pub fn sample<R: Rng>(
    model: &Denoiser,
    token: DatasetToken,
    channels: usize,
    len: usize,
    embed: &EmbedConfig,
    rng: &mut R,
    cfg: &DiffusionConfig,
) -> Result<TimeSeries> {
    let den = Preconditioned {
        model,
        token,
        channels,
        cfg,
    };
    let mut out = sample_series(&den, 1, channels, len, embed, rng, cfg, model.dtype())?;
    Ok(out.remove(0))
}
