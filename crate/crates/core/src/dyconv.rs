//! Dynamic convolution: one canonical kernel resized over its channel axes at
//! call time, plus the static channel-padding baseline it is compared against.
//!
//! Resizing is separable Catmull-Rom cubic (`a = −0.5`) with half-pixel
//! (align-corners = false) coordinates and edge clamping. Interpolation is
//! linear in the canonical weights, so gradients reach them through the
//! resize matrices.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Scope;

const CUBIC_A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel.
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Row-major `[dst × src]` matrix that resamples a length-`src` axis to `dst`.
pub fn cubic_resize_matrix(src: usize, dst: usize) -> Array2<f64> {
    assert!(src >= 1 && dst >= 1, "resize sizes must be positive");
    let mut m = Array2::<f64>::zeros((dst, src));
    let scale = src as f64 / dst as f64;
    for j in 0..dst {
        let s = (j as f64 + 0.5) * scale - 0.5;
        let base = s.floor();
        let frac = s - base;
        for k in -1i64..=2 {
            let idx = (base as i64 + k).clamp(0, src as i64 - 1) as usize;
            m[[j, idx]] += cubic_weight(k as f64 - frac);
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalKernel {
    /// `[K × K × C₀ × C₁]`
    pub weights: Array4<f64>,
    /// `[C₁]`
    pub bias: Array1<f64>,
}

impl CanonicalKernel {
    pub fn zeros(k: usize, c0: usize, c1: usize) -> Self {
        Self {
            weights: Array4::zeros((k, k, c0, c1)),
            bias: Array1::zeros(c1),
        }
    }

    pub fn random<R: Rng>(k: usize, c0: usize, c1: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / ((c0 * k * k) as f64).sqrt()).unwrap();
        Self {
            weights: Array4::from_shape_fn((k, k, c0, c1), |_| normal.sample(rng)),
            bias: Array1::from_shape_fn(c1, |_| normal.sample(rng)),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_ref(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_ref(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.shape();
        if s[0] != s[1] || s[0].is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be K×K with odd K, got {s:?}")));
        }
        if self.bias.len() != s[3] {
            return Err(Error::Shape(format!(
                "bias has {} entries for C₁={}",
                self.bias.len(),
                s[3]
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("canonical kernel has non-finite weights".into()));
        }
        Ok(())
    }
}

/// Resizes the canonical kernel to `[K × K × C_in × C_out]`.
pub fn interp_kernel(kernel: &CanonicalKernel, c_in: usize, c_out: usize) -> Result<Array4<f64>> {
    kernel.validate()?;
    if c_in == 0 || c_out == 0 {
        return Err(Error::Config("DyConv channel counts must be >= 1".into()));
    }
    let k = kernel.kernel_size();
    let a_in = cubic_resize_matrix(kernel.in_ref(), c_in);
    let a_out = cubic_resize_matrix(kernel.out_ref(), c_out);
    let mut out = Array4::<f64>::zeros((k, k, c_in, c_out));
    for ky in 0..k {
        for kx in 0..k {
            let slice = kernel.weights.slice(ndarray::s![ky, kx, .., ..]);
            let resized = a_in.dot(&slice).dot(&a_out.t());
            out.slice_mut(ndarray::s![ky, kx, .., ..]).assign(&resized);
        }
    }
    Ok(out)
}

pub fn interp_bias(kernel: &CanonicalKernel, c_out: usize) -> Result<Array1<f64>> {
    if c_out == 0 {
        return Err(Error::Config("DyConv channel counts must be >= 1".into()));
    }
    Ok(cubic_resize_matrix(kernel.out_ref(), c_out).dot(&kernel.bias))
}

/// Stride-1 "same" cross-correlation with a `[K × K × C_in × C_out]` kernel.
pub fn conv2d_same(x: &Array3<f64>, weights: &Array4<f64>, bias: &Array1<f64>) -> Result<Array3<f64>> {
    let (c_in, h, w) = x.dim();
    let (k, k2, wc_in, c_out) = weights.dim();
    if k != k2 || k % 2 == 0 {
        return Err(Error::Config(format!("kernel must be K×K with odd K, got {k}×{k2}")));
    }
    if wc_in != c_in {
        return Err(Error::Shape(format!("input has {c_in} channels, kernel expects {wc_in}")));
    }
    if bias.len() != c_out {
        return Err(Error::Shape(format!("bias has {} entries for {c_out} outputs", bias.len())));
    }
    let pad = (k / 2) as i64;
    let mut out = Array3::<f64>::zeros((c_out, h, w));
    for co in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[co];
                for ky in 0..k {
                    let sy = y as i64 + ky as i64 - pad;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as i64 + kx as i64 - pad;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        for ci in 0..c_in {
                            acc += weights[[ky, kx, ci, co]] * x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
                out[[co, y, xx]] = acc;
            }
        }
    }
    Ok(out)
}

pub fn dyconv_forward(x: &Array3<f64>, kernel: &CanonicalKernel, c_out: usize) -> Result<Array3<f64>> {
    let (c_in, h, w) = x.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("DyConv input must have H, W >= 1".into()));
    }
    let weights = interp_kernel(kernel, c_in, c_out)?;
    let bias = interp_bias(kernel, c_out)?;
    conv2d_same(x, &weights, &bias)
}

/// Static weights for the channel-padding baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedKernel {
    /// `[K × K × C_max × C_out]`
    pub weights: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedOutput {
    pub values: Array3<f64>,
    /// The input zero-padded to `C_max` channels.
    pub padded_input: Array3<f64>,
    /// Number of leading channels that carry real data; the loss ignores the rest.
    pub valid_channels: usize,
}

pub fn padded_adapter_forward(x: &Array3<f64>, kernel: &PaddedKernel) -> Result<PaddedOutput> {
    let (c_in, h, w) = x.dim();
    let c_max = kernel.weights.shape()[2];
    if c_in > c_max {
        return Err(Error::Config(format!(
            "input has {c_in} channels but the padded adapter holds at most {c_max}"
        )));
    }
    let mut padded = Array3::<f64>::zeros((c_max, h, w));
    padded.slice_mut(ndarray::s![..c_in, .., ..]).assign(x);
    let values = conv2d_same(&padded, &kernel.weights, &kernel.bias)?;
    Ok(PaddedOutput {
        values,
        padded_input: padded,
        valid_channels: c_in,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    DyConv {
        kernel: usize,
        c_in: usize,
        c_out: usize,
        height: usize,
        width: usize,
    },
    Padded {
        kernel: usize,
        c_max: usize,
        c_out: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    pub conv: u64,
    pub interp: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.conv + self.interp
    }
}

/// Multiply-adds per resized weight for a dense 4×4 cubic stencil.
pub const INTERP_FLOPS_PER_WEIGHT: u64 = 32;

/// Closed-form FLOPs (one multiply-add = 2) for a single-image forward.
pub fn flops_estimate(spec: &LayerSpec) -> FlopCount {
    match *spec {
        LayerSpec::DyConv {
            kernel,
            c_in,
            c_out,
            height,
            width,
        } => {
            let k2 = (kernel * kernel) as u64;
            FlopCount {
                conv: 2 * k2 * (c_in * c_out * height * width) as u64,
                interp: k2 * (c_in * c_out) as u64 * INTERP_FLOPS_PER_WEIGHT,
            }
        }
        LayerSpec::Padded {
            kernel,
            c_max,
            c_out,
            height,
            width,
        } => FlopCount {
            conv: 2 * (kernel * kernel * c_max * c_out * height * width) as u64,
            interp: 0,
        },
    }
}

/// Tensor-side DyConv layer used inside the denoiser.
#[derive(Debug, Clone)]
pub struct DyConv {
    /// `[C₁, C₀, K, K]`, the convolution layout.
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl DyConv {
    pub fn new(scope: &mut Scope<'_>, kernel: usize, c0: usize, c1: usize, zero_init: bool) -> Result<Self> {
        let std = if zero_init {
            0.0
        } else {
            1.0 / ((c0 * kernel * kernel) as f64).sqrt()
        };
        let weight = scope.normal("weight", &[c1, c0, kernel, kernel], std)?;
        let bias = scope.zeros("bias", &[c1])?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn from_canonical(kernel: &CanonicalKernel, dtype: DType, device: &Device) -> Result<Self> {
        kernel.validate()?;
        let weight = Tensor::from_iter(
            kernel.weights.iter().copied(),
            device,
        )?
        .reshape(kernel.weights.dim())?
        .permute((3, 2, 0, 1))?
        .contiguous()?
        .to_dtype(dtype)?;
        let bias = Tensor::from_iter(kernel.bias.iter().copied(), device)?.to_dtype(dtype)?;
        Ok(Self {
            weight,
            bias,
            kernel: kernel.kernel_size(),
        })
    }

    pub fn reference_channels(&self) -> (usize, usize) {
        let dims = self.weight.dims();
        (dims[1], dims[0])
    }

    /// Interpolated `[C_out, C_in, K, K]` weights and `[C_out]` bias.
    pub fn materialize(&self, c_in: usize, c_out: usize) -> Result<(Tensor, Tensor)> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config("DyConv channel counts must be >= 1".into()));
        }
        let (c0, c1) = self.reference_channels();
        let k2 = self.kernel * self.kernel;
        let dtype = self.weight.dtype();
        let device = self.weight.device();
        let a_out = matrix_tensor(&cubic_resize_matrix(c1, c_out), dtype, device)?;
        let a_in_t = matrix_tensor(&cubic_resize_matrix(c0, c_in).t().to_owned(), dtype, device)?;

        let w = a_out.matmul(&self.weight.reshape((c1, c0 * k2))?)?;
        let w = w
            .reshape((c_out, c0, k2))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((c_out * k2, c0))?
            .matmul(&a_in_t)?
            .reshape((c_out, k2, c_in))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((c_out, c_in, self.kernel, self.kernel))?;
        let b = a_out.matmul(&self.bias.unsqueeze(1)?)?.squeeze(1)?;
        Ok((w, b))
    }

    /// `x`: `[B, C_in, H, W]` → `[B, C_out, H, W]`.
    pub fn forward(&self, x: &Tensor, c_out: usize) -> Result<Tensor> {
        let c_in = x.dim(1)?;
        let (w, b) = self.materialize(c_in, c_out)?;
        let y = x.conv2d(&w, self.kernel / 2, 1, 1, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, c_out, 1, 1))?)?)
    }
}

/// Static convolution over inputs zero-padded to `C_max` channels.
#[derive(Debug, Clone)]
pub struct PaddedConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl PaddedConv {
    pub fn new(scope: &mut Scope<'_>, kernel: usize, c_max_in: usize, c_out: usize, zero_init: bool) -> Result<Self> {
        let std = if zero_init {
            0.0
        } else {
            1.0 / ((c_max_in * kernel * kernel) as f64).sqrt()
        };
        let weight = scope.normal("weight", &[c_out, c_max_in, kernel, kernel], std)?;
        let bias = scope.zeros("bias", &[c_out])?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn max_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn max_out(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Pads the channel axis of `x` to `C_max`, convolves, and keeps the first
    /// `keep_out` output channels (the rest correspond to padded data channels).
    pub fn forward(&self, x: &Tensor, keep_out: usize) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let c_max = self.max_in();
        if c_in > c_max {
            return Err(Error::Config(format!(
                "input has {c_in} channels but the padded adapter holds at most {c_max}"
            )));
        }
        if keep_out == 0 || keep_out > self.max_out() {
            return Err(Error::Config(format!(
                "cannot keep {keep_out} of {} output channels",
                self.max_out()
            )));
        }
        let x = if c_in < c_max {
            let pad = Tensor::zeros((b, c_max - c_in, h, w), x.dtype(), x.device())?;
            Tensor::cat(&[x, &pad], 1)?
        } else {
            x.clone()
        };
        let y = x
            .conv2d(&self.weight, self.kernel / 2, 1, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, self.max_out(), 1, 1))?)?;
        if keep_out < self.max_out() {
            Ok(y.narrow(1, 0, keep_out)?)
        } else {
            Ok(y)
        }
    }
}

fn matrix_tensor(m: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (r, c) = m.dim();
    let data: Vec<f64> = m.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), device)?.to_dtype(dtype)?)
}
