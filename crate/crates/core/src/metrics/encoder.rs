//! Contrastive series encoder: stacked causal dilated convolutions, global max
//! pooling and a linear head, trained with a triplet loss whose positives are
//! sub-windows of the anchor and whose negatives are windows of other series.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, Scope};
use crate::ts2img::TimeSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub embed_dim: usize,
    pub channels: usize,
    /// Residual blocks; block `i` uses dilation `2^i`.
    pub depth: usize,
    pub kernel: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub learning_rate: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            channels: 32,
            depth: 3,
            kernel: 3,
            steps: 400,
            batch_size: 16,
            negatives: 4,
            learning_rate: 1e-3,
        }
    }
}

pub const MIN_CORPUS: usize = 16;

#[derive(Debug, Clone)]
struct CausalConv {
    weight: Tensor,
    bias: Tensor,
    dilation: usize,
}

impl CausalConv {
    fn new(scope: &mut Scope<'_>, c_in: usize, c_out: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        Ok(Self {
            weight: scope.uniform("weight", &[c_out, c_in, kernel], bound)?,
            bias: scope.uniform("bias", &[c_out], bound)?,
            dilation,
        })
    }

    /// `[B, C, L]` → `[B, C_out, L]`, each output depending only on earlier steps.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.dim(2)?;
        let x = x.pad_with_zeros(2, (k - 1) * self.dilation, 0)?;
        let y = x.conv1d(&self.weight, 0, 1, self.dilation, 1)?;
        Ok(y.broadcast_add(&self.bias.unsqueeze(1)?)?)
    }
}

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(((x.relu()? * 0.99)? + (x * 0.01)?)?)
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: CausalConv,
    conv2: CausalConv,
    skip: Option<CausalConv>,
}

pub struct ContrastiveEncoder {
    store: ParamStore,
    blocks: Vec<ResidualBlock>,
    head: Linear,
    channels: usize,
}

impl ContrastiveEncoder {
    pub fn new(in_channels: usize, spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.embed_dim == 0 || spec.channels == 0 || spec.depth == 0 || spec.kernel == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut store = ParamStore::new(DType::F32);
        let mut scope = Scope::new(&mut store, rng);
        let mut blocks = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let c_in = if i == 0 { in_channels } else { spec.channels };
            let dilation = 1 << i;
            let mut s = scope.sub(format!("block{i}"));
            let conv1 = CausalConv::new(&mut s.sub("conv1"), c_in, spec.channels, spec.kernel, dilation)?;
            let conv2 = CausalConv::new(&mut s.sub("conv2"), spec.channels, spec.channels, spec.kernel, dilation)?;
            let skip = if c_in != spec.channels {
                Some(CausalConv::new(&mut s.sub("skip"), c_in, spec.channels, 1, 1)?)
            } else {
                None
            };
            blocks.push(ResidualBlock { conv1, conv2, skip });
        }
        let head = Linear::new(&mut scope.sub("head"), spec.channels, spec.embed_dim)?;
        Ok(Self {
            store,
            blocks,
            head,
            channels: in_channels,
        })
    }

    /// `[B, d, L]` → `[B, embed_dim]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            let y = leaky_relu(&b.conv1.forward(&h)?)?;
            let y = leaky_relu(&b.conv2.forward(&y)?)?;
            let skip = match &b.skip {
                Some(s) => s.forward(&h)?,
                None => h,
            };
            h = (y + skip)?;
        }
        self.head.forward(&h.max(2)?)
    }

    fn check(&self, series: &[TimeSeries]) -> Result<()> {
        if let Some(bad) = series.iter().find(|s| s.channels() != self.channels) {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {}",
                self.channels,
                bad.channels()
            )));
        }
        Ok(())
    }

    /// L2-normalised embeddings, one row per series.
    pub fn embed(&self, series: &[TimeSeries]) -> Result<DMatrix<f64>> {
        self.check(series)?;
        let dim = self.head_dim()?;
        let mut out = DMatrix::zeros(series.len(), dim);
        let mut row = 0;
        // Equal lengths are batched together.
        for chunk in series.chunk_by(|a, b| a.len() == b.len()) {
            for piece in chunk.chunks(256) {
                let windows: Vec<(&TimeSeries, usize, usize)> = piece.iter().map(|s| (s, 0, s.len())).collect();
                let z = self.forward(&stack_windows(&windows)?)?.detach();
                let norm = z.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
                let z: Vec<Vec<f32>> = z.broadcast_div(&norm)?.to_vec2()?;
                for v in z {
                    for (j, x) in v.into_iter().enumerate() {
                        out[(row, j)] = f64::from(x);
                    }
                    row += 1;
                }
            }
        }
        Ok(out)
    }

    fn head_dim(&self) -> Result<usize> {
        let x = Tensor::zeros((1, self.channels, 1), DType::F32, &Device::Cpu)?;
        Ok(self.forward(&x)?.dim(1)?)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }
}

/// `[B, d, L]` from `(series, start, len)` windows of a common length.
fn stack_windows(windows: &[(&TimeSeries, usize, usize)]) -> Result<Tensor> {
    let len = windows[0].2;
    let d = windows[0].0.channels();
    let mut data = Vec::with_capacity(windows.len() * d * len);
    for &(s, start, l) in windows {
        debug_assert_eq!(l, len);
        for c in 0..d {
            for t in start..start + len {
                data.push(s.values[[t, c]] as f32);
            }
        }
    }
    Ok(Tensor::from_vec(data, (windows.len(), d, len), &Device::Cpu)?)
}

fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    // log σ(x) = −softplus(−x) = min(x, 0) − log(1 + e^{−|x|})
    let neg_abs = x.abs()?.neg()?;
    let min0 = ((x - x.abs()?)? * 0.5)?;
    Ok((min0 - (neg_abs.exp()? + 1.0)?.log()?)?)
}

/// Trains an encoder on `corpus`.
pub fn train_encoder(corpus: &[TimeSeries], spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<ContrastiveEncoder> {
    if corpus.len() < MIN_CORPUS {
        return Err(Error::InsufficientData(format!(
            "contrastive encoder needs at least {MIN_CORPUS} series, got {}",
            corpus.len()
        )));
    }
    let d = corpus[0].channels();
    let len = corpus.iter().map(TimeSeries::len).min().unwrap_or(0);
    let encoder = ContrastiveEncoder::new(d, spec, rng)?;
    encoder.check(corpus)?;
    let mut opt = AdamW::new(
        encoder.store.vars(),
        ParamsAdamW {
            lr: spec.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let n = corpus.len();
    let b = spec.batch_size.min(n).max(1);
    let min_len = (len / 4).max(1);
    for _ in 0..spec.steps {
        let anchor_len = rng.random_range(min_len..=len);
        let pos_len = rng.random_range(min_len..=anchor_len);
        let neg_len = pos_len;
        let mut anchors = Vec::with_capacity(b);
        let mut positives = Vec::with_capacity(b);
        let mut negatives = Vec::with_capacity(b * spec.negatives);
        for _ in 0..b {
            let i = rng.random_range(0..n);
            let s = &corpus[i];
            let a0 = rng.random_range(0..=s.len() - anchor_len);
            let p0 = a0 + rng.random_range(0..=anchor_len - pos_len);
            anchors.push((s, a0, anchor_len));
            positives.push((s, p0, pos_len));
            for _ in 0..spec.negatives {
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                let o = &corpus[j];
                negatives.push((o, rng.random_range(0..=o.len() - neg_len), neg_len));
            }
        }
        let za = encoder.forward(&stack_windows(&anchors)?)?;
        let zp = encoder.forward(&stack_windows(&positives)?)?;
        let zn = encoder
            .forward(&stack_windows(&negatives)?)?
            .reshape((b, spec.negatives, za.dim(1)?))?;
        let pos = (&za * &zp)?.sum(1)?;
        let neg = zn.broadcast_mul(&za.unsqueeze(1)?)?.sum(2)?;
        let loss = ((log_sigmoid(&pos)?.sum_all()? + log_sigmoid(&neg.neg()?)?.sum_all()?)? * (-1.0 / b as f64))?;
        opt.step(&loss.backward()?)?;
    }
    Ok(encoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_ar1, generate_sine_with, Ar1Params, SineParams};
    use rand::SeedableRng;

    fn corpus(rng: &mut ChaCha8Rng) -> Vec<TimeSeries> {
        let mut xs = generate_sine_with(60, 24, 2, &SineParams { freq: (0.05, 0.6), phase: (0.0, 6.0) }, rng, "s");
        xs.extend(generate_ar1(60, 24, 2, &Ar1Params::default(), rng, "a").unwrap());
        xs
    }

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = corpus(&mut rng);
        let spec = EncoderSpec { steps: 5, ..Default::default() };
        let enc = train_encoder(&data, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let e1 = enc.embed(&data[..10]).unwrap();
        let e2 = enc.embed(&data[..10]).unwrap();
        assert_eq!(e1.shape(), (10, 16));
        assert_eq!(e1, e2);
        for r in 0..10 {
            assert!((e1.row(r).norm() - 1.0).abs() < 1e-5);
        }
        let again = train_encoder(&data, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again.embed(&data[..10]).unwrap(), e1);
    }

    #[test]
    fn too_small_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = corpus(&mut rng);
        assert!(matches!(
            train_encoder(&data[..10], &EncoderSpec::default(), &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let x = Tensor::new(&[-100f32, 0.0, 100.0], &Device::Cpu).unwrap();
        let v: Vec<f32> = log_sigmoid(&x).unwrap().to_vec1().unwrap();
        assert!((v[0] + 100.0).abs() < 1e-4);
        assert!((v[1] + std::f32::consts::LN_2).abs() < 1e-6);
        assert!(v[2].abs() < 1e-6);
    }

    #[test]
    fn sub_windows_embed_closer_than_other_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = corpus(&mut rng);
        let enc = train_encoder(&data, &EncoderSpec::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut wins = 0;
        let trials = 200;
        for _ in 0..trials {
            let i = rng.random_range(0..data.len());
            let mut j = rng.random_range(0..data.len() - 1);
            if j >= i {
                j += 1;
            }
            let start = rng.random_range(0..=8);
            let sub = TimeSeries::new(data[i].values.slice(ndarray::s![start..start + 16, ..]).to_owned(), "s");
            let other = TimeSeries::new(data[j].values.slice(ndarray::s![start..start + 16, ..]).to_owned(), "s");
            let e = enc.embed(&[data[i].clone()]).unwrap();
            let es = enc.embed(&[sub]).unwrap();
            let eo = enc.embed(&[other]).unwrap();
            if e.row(0).dot(&es.row(0)) > e.row(0).dot(&eo.row(0)) {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.8 * trials as f64, "{wins}/{trials}");
    }
}
