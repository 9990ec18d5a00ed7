//! UNet denoising network with DyConv input/output projections and
//! dataset-token conditioning through adaptive group normalisation.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyconv::{DyConv, PaddedConv};
use crate::error::{Error, Result};
use crate::nn::{upsample2x, Conv2d, GroupNorm, Linear, ParamStore, Scope, SelfAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeVariant {
    Base,
    Medium,
    Large,
    #[serde(rename = "XL")]
    Xl,
    Custom,
}

impl SizeVariant {
    pub fn base_channels(self) -> Option<usize> {
        match self {
            SizeVariant::Base => Some(32),
            SizeVariant::Medium => Some(48),
            SizeVariant::Large => Some(64),
            SizeVariant::Xl => Some(80),
            SizeVariant::Custom => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelAdapter {
    DyConv {
        kernel: usize,
        in_ref: usize,
        out_ref: usize,
    },
    /// Ablation baseline: data channels zero-padded to a fixed maximum.
    Padded { kernel: usize, max_channels: usize },
}

impl Default for ChannelAdapter {
    fn default() -> Self {
        ChannelAdapter::DyConv {
            kernel: 3,
            in_ref: 128,
            out_ref: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub num_res_blocks: usize,
    pub image_side: usize,
    pub size_variant: SizeVariant,
    pub adapter: ChannelAdapter,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::variant(SizeVariant::Base)
    }
}

impl ModelConfig {
    pub fn variant(variant: SizeVariant) -> Self {
        Self {
            base_channels: variant.base_channels().unwrap_or(32),
            channel_multipliers: vec![1, 2, 2, 4],
            attention_resolutions: vec![8, 4, 2],
            num_res_blocks: 3,
            image_side: 8,
            size_variant: variant,
            adapter: ChannelAdapter::default(),
        }
    }

    pub fn noise_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn token_dim(&self) -> usize {
        self.base_channels
    }

    fn has_body(&self) -> bool {
        !self.channel_multipliers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.image_side == 0 {
            return Err(Error::Config("base_channels and image_side must be >= 1".into()));
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config("base_channels must be even".into()));
        }
        if let Some(width) = self.size_variant.base_channels() {
            if width != self.base_channels {
                return Err(Error::Config(format!(
                    "{:?} uses base_channels={width}, config has {}",
                    self.size_variant, self.base_channels
                )));
            }
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        let levels = self.channel_multipliers.len();
        if levels > 1 {
            let factor = 1usize << (levels - 1);
            if !self.image_side.is_multiple_of(factor) {
                return Err(Error::Config(format!(
                    "image side {} cannot be halved {} times",
                    self.image_side,
                    levels - 1
                )));
            }
        }
        match self.adapter {
            ChannelAdapter::DyConv {
                kernel,
                in_ref,
                out_ref,
            } => {
                if kernel % 2 == 0 || in_ref == 0 || out_ref == 0 {
                    return Err(Error::Config("DyConv needs odd K and positive reference channels".into()));
                }
            }
            ChannelAdapter::Padded {
                kernel,
                max_channels,
            } => {
                if kernel % 2 == 0 || max_channels == 0 {
                    return Err(Error::Config("padded adapter needs odd K and max_channels >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Most data channels the model can consume (unbounded for DyConv).
    pub fn max_data_channels(&self) -> Option<usize> {
        match self.adapter {
            ChannelAdapter::DyConv { .. } => None,
            ChannelAdapter::Padded { max_channels, .. } => Some(max_channels),
        }
    }
}

fn linear_params(i: usize, o: usize) -> usize {
    i * o + o
}

fn conv_params(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + o
}

fn res_block_params(i: usize, o: usize, emb: usize) -> usize {
    let skip = if i != o { conv_params(i, o, 1) } else { 0 };
    2 * i + conv_params(i, o, 3) + linear_params(emb, 2 * o) + 2 * o + conv_params(o, o, 3) + skip
}

fn attention_params(c: usize) -> usize {
    2 * c + linear_params(c, 3 * c) + linear_params(c, c)
}

/// Exact trainable-parameter count for `cfg` with `num_tokens` registered datasets.
pub fn count_parameters(cfg: &ModelConfig, num_tokens: usize) -> usize {
    let b = cfg.base_channels;
    let mut total = num_tokens * cfg.token_dim();
    total += match cfg.adapter {
        ChannelAdapter::DyConv {
            kernel,
            in_ref,
            out_ref,
        } => 2 * (kernel * kernel * in_ref * out_ref + out_ref),
        ChannelAdapter::Padded {
            kernel,
            max_channels,
        } => conv_params(max_channels, b, kernel) + conv_params(b, max_channels, kernel),
    };
    if !cfg.has_body() {
        return total;
    }
    let emb = cfg.noise_dim() + cfg.token_dim();
    total += linear_params(b, cfg.noise_dim()) + linear_params(cfg.noise_dim(), cfg.noise_dim());

    let levels = cfg.channel_multipliers.len();
    let mut res = cfg.image_side;
    let mut ch = b;
    let mut skips = vec![b];
    for (level, &mult) in cfg.channel_multipliers.iter().enumerate() {
        for _ in 0..cfg.num_res_blocks {
            total += res_block_params(ch, b * mult, emb);
            ch = b * mult;
            if cfg.attention_resolutions.contains(&res) {
                total += attention_params(ch);
            }
            skips.push(ch);
        }
        if level + 1 < levels {
            total += conv_params(ch, ch, 3);
            res /= 2;
            skips.push(ch);
        }
    }
    total += 2 * res_block_params(ch, ch, emb) + attention_params(ch);
    for (level, &mult) in cfg.channel_multipliers.iter().enumerate().rev() {
        for i in 0..=cfg.num_res_blocks {
            let skip = skips.pop().unwrap_or(0);
            total += res_block_params(ch + skip, b * mult, emb);
            ch = b * mult;
            if cfg.attention_resolutions.contains(&res) {
                total += attention_params(ch);
            }
            if level > 0 && i == cfg.num_res_blocks {
                total += conv_params(ch, ch, 3);
                res *= 2;
            }
        }
    }
    total + 2 * ch
}

/// Conditioning token: a registered dataset or the frozen all-zero null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetToken {
    Null,
    Id(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRegistry {
    ids: BTreeMap<String, usize>,
    next_id: usize,
}

impl TokenRegistry {
    pub fn get(&self, name: &str) -> Option<DatasetToken> {
        self.ids.get(name).map(|&id| DatasetToken::Id(id))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn allocate(&mut self, name: &str) -> Result<usize> {
        if self.ids.contains_key(name) {
            return Err(Error::TokenCollision(name.to_string()));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    ada: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out_ch: usize,
}

impl ResBlock {
    fn new(scope: &mut Scope<'_>, c_in: usize, c_out: usize, emb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut scope.sub("norm1"), c_in)?,
            conv1: Conv2d::new(&mut scope.sub("conv1"), c_in, c_out, 3, 1, false)?,
            ada: Linear::new(&mut scope.sub("ada"), emb, 2 * c_out)?,
            norm2: GroupNorm::new(&mut scope.sub("norm2"), c_out)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), c_out, c_out, 3, 1, true)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&mut scope.sub("skip"), c_in, c_out, 1, 1, false)?)
            } else {
                None
            },
            out_ch: c_out,
        })
    }

    /// `emb_act` is `SiLU(emb)`, shared across blocks.
    fn forward(&self, x: &Tensor, emb_act: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let ada = self.ada.forward(emb_act)?;
        let b = ada.dim(0)?;
        let scale = ada.narrow(1, 0, self.out_ch)?.reshape((b, self.out_ch, 1, 1))?;
        let shift = ada.narrow(1, self.out_ch, self.out_ch)?.reshape((b, self.out_ch, 1, 1))?;
        let h = self
            .norm2
            .forward(&h)?
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    res: ResBlock,
    attn: Option<SelfAttention>,
}

impl Block {
    fn forward(&self, x: &Tensor, emb_act: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, emb_act)?;
        match &self.attn {
            Some(attn) => attn.forward(&h),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
enum EncLayer {
    Block(Box<Block>),
    Down(Conv2d),
}

#[derive(Debug, Clone)]
struct DecLayer {
    block: Block,
    up: Option<Conv2d>,
}

#[derive(Debug, Clone)]
enum Adapter {
    Dy { input: DyConv, output: DyConv },
    Padded { input: PaddedConv, output: PaddedConv },
}

#[derive(Debug, Clone)]
struct Body {
    noise1: Linear,
    noise2: Linear,
    enc: Vec<EncLayer>,
    mid: (ResBlock, SelfAttention, ResBlock),
    dec: Vec<DecLayer>,
    out_norm: GroupNorm,
}

/// The network `N_θ(c_in·x; c_noise; y)`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: ModelConfig,
    store: ParamStore,
    registry: TokenRegistry,
    tokens: BTreeMap<usize, Tensor>,
    adapter: Adapter,
    body: Option<Body>,
}

impl Denoiser {
    pub fn new(cfg: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = cfg.base_channels;
        let mut scope = Scope::new(&mut store, &mut rng);

        let adapter = match cfg.adapter {
            ChannelAdapter::DyConv {
                kernel,
                in_ref,
                out_ref,
            } => Adapter::Dy {
                input: DyConv::new(&mut scope.sub("dyconv_in"), kernel, in_ref, out_ref, false)?,
                output: DyConv::new(&mut scope.sub("dyconv_out"), kernel, in_ref, out_ref, false)?,
            },
            ChannelAdapter::Padded {
                kernel,
                max_channels,
            } => Adapter::Padded {
                input: PaddedConv::new(&mut scope.sub("padded_in"), kernel, max_channels, b, false)?,
                output: PaddedConv::new(&mut scope.sub("padded_out"), kernel, b, max_channels, false)?,
            },
        };

        let body = if cfg.has_body() {
            Some(Self::build_body(&cfg, &mut scope)?)
        } else {
            None
        };

        Ok(Self {
            cfg,
            store,
            registry: TokenRegistry::default(),
            tokens: BTreeMap::new(),
            adapter,
            body,
        })
    }

    fn build_body(cfg: &ModelConfig, scope: &mut Scope<'_>) -> Result<Body> {
        let b = cfg.base_channels;
        let emb = cfg.noise_dim() + cfg.token_dim();
        let noise1 = Linear::new(&mut scope.sub("noise.0"), b, cfg.noise_dim())?;
        let noise2 = Linear::new(&mut scope.sub("noise.1"), cfg.noise_dim(), cfg.noise_dim())?;

        let levels = cfg.channel_multipliers.len();
        let mut res = cfg.image_side;
        let mut ch = b;
        let mut skips = vec![b];
        let mut enc = Vec::new();
        for (level, &mult) in cfg.channel_multipliers.iter().enumerate() {
            for i in 0..cfg.num_res_blocks {
                let mut s = scope.sub(format!("enc.{level}.{i}"));
                let block = Block {
                    res: ResBlock::new(&mut s.sub("res"), ch, b * mult, emb)?,
                    attn: if cfg.attention_resolutions.contains(&res) {
                        Some(SelfAttention::new(&mut s.sub("attn"), b * mult)?)
                    } else {
                        None
                    },
                };
                ch = b * mult;
                enc.push(EncLayer::Block(Box::new(block)));
                skips.push(ch);
            }
            if level + 1 < levels {
                let down = Conv2d::new(&mut scope.sub(format!("enc.{level}.down")), ch, ch, 3, 2, false)?;
                enc.push(EncLayer::Down(down));
                res /= 2;
                skips.push(ch);
            }
        }

        let mid = (
            ResBlock::new(&mut scope.sub("mid.res0"), ch, ch, emb)?,
            SelfAttention::new(&mut scope.sub("mid.attn"), ch)?,
            ResBlock::new(&mut scope.sub("mid.res1"), ch, ch, emb)?,
        );

        let mut dec = Vec::new();
        for (level, &mult) in cfg.channel_multipliers.iter().enumerate().rev() {
            for i in 0..=cfg.num_res_blocks {
                let skip = skips.pop().ok_or_else(|| Error::Config("skip stack underflow".into()))?;
                let mut s = scope.sub(format!("dec.{level}.{i}"));
                let block = Block {
                    res: ResBlock::new(&mut s.sub("res"), ch + skip, b * mult, emb)?,
                    attn: if cfg.attention_resolutions.contains(&res) {
                        Some(SelfAttention::new(&mut s.sub("attn"), b * mult)?)
                    } else {
                        None
                    },
                };
                ch = b * mult;
                let up = if level > 0 && i == cfg.num_res_blocks {
                    res *= 2;
                    Some(Conv2d::new(&mut s.sub("up"), ch, ch, 3, 1, false)?)
                } else {
                    None
                };
                dec.push(DecLayer { block, up });
            }
        }
        let out_norm = GroupNorm::new(&mut scope.sub("out_norm"), ch)?;
        Ok(Body {
            noise1,
            noise2,
            enc,
            mid,
            dec,
            out_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn registry(&self) -> &TokenRegistry {
        &self.registry
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn token(&self, name: &str) -> Option<DatasetToken> {
        self.registry.get(name)
    }

    /// Allocates a fresh, randomly initialised token row for `name`.
    pub fn register_token(&mut self, name: &str, seed: u64) -> Result<DatasetToken> {
        let id = self.registry.allocate(name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.cfg.token_dim();
        let t = Scope::new(&mut self.store, &mut rng).normal(&token_param(id), &[dim], 1.0)?;
        self.tokens.insert(id, t);
        Ok(DatasetToken::Id(id))
    }

    fn token_rows(&self, tokens: &[DatasetToken]) -> Result<Tensor> {
        let dim = self.cfg.token_dim();
        let mut used: Vec<DatasetToken> = tokens.to_vec();
        used.sort();
        used.dedup();
        let mut rows = Vec::with_capacity(used.len());
        for tok in &used {
            match tok {
                DatasetToken::Null => rows.push(Tensor::zeros(dim, self.dtype(), self.device())?),
                DatasetToken::Id(id) => rows.push(
                    self.tokens
                        .get(id)
                        .ok_or(Error::UnknownToken(*id))?
                        .clone(),
                ),
            }
        }
        let table = Tensor::stack(&rows, 0)?;
        let index: Vec<u32> = tokens
            .iter()
            .map(|t| used.binary_search(t).unwrap_or(0) as u32)
            .collect();
        let index = Tensor::from_vec(index, tokens.len(), self.device())?;
        Ok(table.index_select(&index, 0)?)
    }

    fn noise_features(&self, c_noise: &Tensor) -> Result<Tensor> {
        let half = self.cfg.base_channels / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        let freqs = Tensor::from_vec(freqs, (1, half), self.device())?.to_dtype(self.dtype())?;
        let args = c_noise.unsqueeze(1)?.broadcast_mul(&freqs)?;
        Ok(Tensor::cat(&[args.cos()?, args.sin()?], 1)?)
    }

    /// `x`: `[B, C_in, n, n]`, `c_noise`: `[B]` → `[B, C_out, n, n]`.
    pub fn forward(&self, x: &Tensor, c_noise: &Tensor, tokens: &[DatasetToken], c_out: usize) -> Result<Tensor> {
        let (batch, c_in, h, w) = x.dims4()?;
        let n = self.cfg.image_side;
        if h != n || w != n {
            return Err(Error::Shape(format!("expected {n}×{n} images, got {h}×{w}")));
        }
        if c_noise.dims() != [batch] {
            return Err(Error::Shape(format!(
                "noise conditioning is {:?}, expected [{batch}]",
                c_noise.dims()
            )));
        }
        if tokens.len() != batch {
            return Err(Error::Shape(format!("{} tokens for batch of {batch}", tokens.len())));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::Shape("channel counts must be >= 1".into()));
        }
        if let Some(max) = self.cfg.max_data_channels() {
            if c_in > max || c_out > max {
                return Err(Error::Shape(format!(
                    "padded adapter supports {max} channels, got {c_in} in / {c_out} out"
                )));
            }
        }
        let b = self.cfg.base_channels;
        let mut h = match &self.adapter {
            Adapter::Dy { input, .. } => input.forward(x, b)?,
            Adapter::Padded { input, .. } => input.forward(x, b)?,
        };

        if let Some(body) = &self.body {
            let noise = body
                .noise2
                .forward(&body.noise1.forward(&self.noise_features(c_noise)?)?.silu()?)?;
            let emb = Tensor::cat(&[noise, self.token_rows(tokens)?], 1)?.silu()?;

            let mut skips = vec![h.clone()];
            for layer in &body.enc {
                h = match layer {
                    EncLayer::Block(block) => block.forward(&h, &emb)?,
                    EncLayer::Down(conv) => conv.forward(&h)?,
                };
                skips.push(h.clone());
            }
            h = body.mid.0.forward(&h, &emb)?;
            h = body.mid.1.forward(&h)?;
            h = body.mid.2.forward(&h, &emb)?;
            for layer in &body.dec {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::Shape("skip stack underflow".into()))?;
                h = layer.block.forward(&Tensor::cat(&[&h, &skip], 1)?, &emb)?;
                if let Some(up) = &layer.up {
                    h = up.forward(&upsample2x(&h)?)?;
                }
            }
            h = body.out_norm.forward(&h)?.silu()?;
        } else {
            // Still validate tokens in the degenerate configuration.
            self.token_rows(tokens)?;
        }

        match &self.adapter {
            Adapter::Dy { output, .. } => output.forward(&h, c_out),
            Adapter::Padded { output, .. } => output.forward(&h, c_out),
        }
    }

    pub fn to_checkpoint(&self, ema: Option<BTreeMap<String, Tensor>>, metadata: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.cfg.clone(),
            registry: self.registry.clone(),
            params: self.store.snapshot()?,
            ema,
            metadata,
        })
    }

    /// Rebuilds the network and loads either raw or EMA parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint, use_ema: bool, dtype: DType) -> Result<Self> {
        let mut model = Self::new(ckpt.model.clone(), dtype, 0)?;
        model.registry = ckpt.registry.clone();
        let dim = model.cfg.token_dim();
        for (_, id) in ckpt.registry.iter() {
            let t = model
                .store
                .insert(token_param(id), Tensor::zeros(dim, DType::F64, &Device::Cpu)?)?;
            model.tokens.insert(id, t);
        }
        let values = if use_ema {
            ckpt.ema.as_ref().ok_or(Error::MissingEma)?
        } else {
            &ckpt.params
        };
        model.store.load(values)?;
        Ok(model)
    }
}

fn token_param(id: usize) -> String {
    format!("token.{id}")
}

pub const CHECKPOINT_FORMAT: &str = "fewgen-checkpoint";
const HEADER_KEY: &str = "fewgen";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, EMA shadow, model config and token registry.
///
/// On disk this is a safetensors container: an 8-byte little-endian header
/// length, a JSON header, then raw tensor bytes. Tensors are stored as
/// `params/<name>` and `ema/<name>`. The header's `__metadata__` map has one
/// key, `fewgen`, whose value is a JSON object with `format`, `version`,
/// `model_config`, `registry` and free-form `metadata`. A single key keeps the
/// bytes stable, since the container writes its map in hash order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub registry: TokenRegistry,
    pub params: BTreeMap<String, Tensor>,
    pub ema: Option<BTreeMap<String, Tensor>>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn ema_swap(&self) -> Result<&BTreeMap<String, Tensor>> {
        self.ema.as_ref().ok_or(Error::MissingEma)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (k, v) in &self.params {
            tensors.push((format!("params/{k}"), v.to_dtype(DType::F32)?.contiguous()?));
        }
        if let Some(ema) = &self.ema {
            for (k, v) in ema {
                tensors.push((format!("ema/{k}"), v.to_dtype(DType::F32)?.contiguous()?));
            }
        }
        let raw: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
            .iter()
            .map(|(k, t)| {
                let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
                let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                Ok((k.clone(), bytes, t.dims().to_vec()))
            })
            .collect::<Result<_>>()?;
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = raw
            .iter()
            .map(|(k, bytes, shape)| {
                Ok((
                    k.clone(),
                    safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)?,
                ))
            })
            .collect::<Result<_>>()?;
        // A single entry keeps the header byte-stable (the container stores metadata in a hash map).
        let header = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": self.model,
            "registry": self.registry,
            "metadata": self.metadata,
        });
        let meta = std::collections::HashMap::from([(HEADER_KEY.to_string(), header.to_string())]);
        Ok(safetensors::serialize(views, Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Schema("checkpoint header has no metadata".into()))?;
        let header: serde_json::Value = serde_json::from_str(
            meta.get(HEADER_KEY)
                .ok_or_else(|| Error::Schema(format!("checkpoint metadata lacks `{HEADER_KEY}`")))?,
        )?;
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("checkpoint header lacks `{k}`")))
        };
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("not a {CHECKPOINT_FORMAT} file")));
        }
        let version = field("version")?
            .as_u64()
            .ok_or_else(|| Error::Schema("bad checkpoint version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
        }
        let model: ModelConfig = serde_json::from_value(field("model_config")?)?;
        let registry: TokenRegistry = serde_json::from_value(field("registry")?)?;
        let metadata = field("metadata")?;

        let st = safetensors::SafeTensors::deserialize(bytes)?;
        let mut params = BTreeMap::new();
        let mut ema = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Schema(format!("tensor `{name}` is not f32")));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
            if let Some(k) = name.strip_prefix("params/") {
                params.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("ema/") {
                ema.insert(k.to_string(), t);
            } else {
                return Err(Error::Schema(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(Self {
            model,
            registry,
            params,
            ema: if ema.is_empty() { None } else { Some(ema) },
            metadata,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![4],
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

    #[test]
    fn analytic_count_matches_built_model() {
        for cfg in [
            tiny(),
            ModelConfig {
                channel_multipliers: vec![1, 2, 2, 4],
                attention_resolutions: vec![8, 4, 2],
                num_res_blocks: 2,
                ..tiny()
            },
            ModelConfig {
                adapter: ChannelAdapter::Padded {
                    kernel: 3,
                    max_channels: 12,
                },
                ..tiny()
            },
        ] {
            let mut model = Denoiser::new(cfg.clone(), DType::F32, 0).unwrap();
            model.register_token("a", 1).unwrap();
            model.register_token("b", 2).unwrap();
            assert_eq!(model.num_parameters(), count_parameters(&cfg, 2));
        }
    }

    #[test]
    fn degenerate_config_counts_tokens_and_dyconv() {
        let cfg = ModelConfig {
            channel_multipliers: vec![],
            ..tiny()
        };
        assert_eq!(count_parameters(&cfg, 3), 3 * 8 + 2 * (9 * 64 + 8));
        let mut model = Denoiser::new(cfg.clone(), DType::F32, 0).unwrap();
        for i in 0..3 {
            model.register_token(&format!("d{i}"), i).unwrap();
        }
        assert_eq!(model.num_parameters(), count_parameters(&cfg, 3));
    }

    #[test]
    fn base_default_is_near_six_million() {
        let n = count_parameters(&ModelConfig::default(), 20) as f64;
        assert!((n / 6.0e6 - 1.0).abs() <= 0.15, "{n}");
    }

    #[test]
    fn forward_shapes_and_tokens() {
        let mut model = Denoiser::new(tiny(), DType::F32, 0).unwrap();
        let a = model.register_token("a", 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, &[2, 7, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let c = Tensor::new(&[0.1f32, -0.3], &Device::Cpu).unwrap();
        let y = model.forward(&x, &c, &[a, DatasetToken::Null], 7).unwrap();
        assert_eq!(y.dims(), &[2, 7, 8, 8]);
        let y3 = model.forward(&x, &c, &[a, a], 3).unwrap();
        assert_eq!(y3.dims(), &[2, 3, 8, 8]);
        assert!(matches!(
            model.forward(&x, &c, &[a, DatasetToken::Id(9)], 7),
            Err(Error::UnknownToken(9))
        ));
        assert!(matches!(model.register_token("a", 3), Err(Error::TokenCollision(_))));
        let bad = randn(&mut rng, &[2, 7, 4, 4], DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.forward(&bad, &c, &[a, a], 7), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut model = Denoiser::new(tiny(), DType::F32, 5).unwrap();
        let a = model.register_token("a", 1).unwrap();
        let ckpt = model
            .to_checkpoint(Some(model.store().snapshot().unwrap()), serde_json::json!({"step": 3}))
            .unwrap();
        let restored = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(restored.model, ckpt.model);
        assert_eq!(restored.registry, ckpt.registry);
        assert_eq!(restored.metadata["step"], 3);
        let loaded = Denoiser::from_checkpoint(&restored, false, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, &[1, 2, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let c = Tensor::new(&[0.2f32], &Device::Cpu).unwrap();
        let y0: Vec<f32> = model.forward(&x, &c, &[a], 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let y1: Vec<f32> = loaded.forward(&x, &c, &[a], 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y0, y1);
    }

    #[test]
    fn missing_ema_is_reported() {
        let model = Denoiser::new(tiny(), DType::F32, 5).unwrap();
        let ckpt = model.to_checkpoint(None, serde_json::Value::Null).unwrap();
        assert!(matches!(ckpt.ema_swap(), Err(Error::MissingEma)));
        assert!(matches!(
            Denoiser::from_checkpoint(&ckpt, true, DType::F32),
            Err(Error::MissingEma)
        ));
    }
}
