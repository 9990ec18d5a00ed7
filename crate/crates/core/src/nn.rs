//! Seeded parameter storage and the small set of layers the networks use.
//!
//! Parameters are created from a ChaCha stream so that initialisation is
//! reproducible; names are hierarchical (`enc.0.res.conv1.weight`) and kept
//! in a `BTreeMap` so iteration order is stable.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` defined twice")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites parameters in place; every stored name must be present.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let value = values
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))?;
            if value.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` is {:?}, stored value is {:?}",
                    var.dims(),
                    value.dims()
                )));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Builder handle that prefixes parameter names and draws initial values.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = self.path(name.as_ref());
        Scope {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut *self.rng)).collect()
        };
        let t = Tensor::from_vec(data, shape, &self.store.device)?;
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.normal(name, shape, 0.0)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::ones(shape, DType::F64, &self.store.device)?;
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.store.device)?;
        let path = self.path(name);
        self.store.insert(path, t)
    }
}

/// Standard-normal tensor drawn from a seeded stream.
pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = scope.normal("weight", &[d_out, d_in], 1.0 / (d_in as f64).sqrt())?;
        let bias = scope.zeros("bias", &[d_out])?;
        Ok(Self { weight, bias })
    }

    pub fn zero_init(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = scope.zeros("weight", &[d_out, d_in])?;
        let bias = scope.zeros("bias", &[d_out])?;
        Ok(Self { weight, bias })
    }

    /// Applies over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let std = if zero_init {
            0.0
        } else {
            (1.0 / (c_in * kernel * kernel) as f64).sqrt()
        };
        let weight = scope.normal("weight", &[c_out, c_in, kernel, kernel], std)?;
        let bias = scope.zeros("bias", &[c_out])?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_out = self.weight.dim(0)?;
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }
}

/// Largest group count ≤ 32 that divides `channels` with at least 4 channels per group.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(32))
        .rev()
        .find(|&g| channels.is_multiple_of(g) && channels / g >= 4)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        let weight = scope.ones("weight", &[channels])?;
        let bias = scope.zeros("bias", &[channels])?;
        Ok(Self {
            groups: group_count(channels),
            weight,
            bias,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xg = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Numerically stable softmax over the last axis built from differentiable ops.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Single-head self-attention over spatial positions with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
}

impl SelfAttention {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut scope.sub("norm"), channels)?,
            qkv: Linear::new(&mut scope.sub("qkv"), channels, 3 * channels)?,
            proj: Linear::zero_init(&mut scope.sub("proj"), channels, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let qkv = self.qkv.forward(&seq)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (c as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = self.proj.forward(&attn.matmul(&v.contiguous()?)?)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

/// Nearest-neighbour 2× upsampling expressed with broadcasts so gradients accumulate.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn group_counts() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(128), 32);
        assert_eq!(group_count(144), 24);
        assert_eq!(group_count(3), 1);
    }

    #[test]
    fn init_is_seed_reproducible() {
        let build = |seed| {
            let mut store = ParamStore::new(DType::F32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scope = Scope::new(&mut store, &mut rng);
            Linear::new(&mut scope.sub("l"), 4, 3).unwrap();
            store.snapshot().unwrap()["l.weight"].to_vec2::<f32>().unwrap()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut scope = Scope::new(&mut store, &mut rng);
        scope.zeros("a", &[1]).unwrap();
        assert!(scope.zeros("a", &[1]).is_err());
    }

    #[test]
    fn group_norm_normalizes() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gn = GroupNorm::new(&mut Scope::new(&mut store, &mut rng), 8).unwrap();
        let x = randn(&mut rng, &[2, 8, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let x = ((x * 3.0).unwrap() + 5.0).unwrap();
        let y = gn.forward(&x).unwrap();
        let mean: f64 = y.mean_all().unwrap().to_scalar().unwrap();
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::arange(0f64, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y: Vec<Vec<f64>> = upsample2x(&x).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(y[0], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(y[3], vec![2.0, 2.0, 3.0, 3.0]);
    }
}
