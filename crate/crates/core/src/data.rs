//! Dataset manifests, CSV ingestion, normalisation, windowing, synthetic
//! generators and few-shot subsampling.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::ts2img::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Minmax,
    Zscore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Windowing {
    /// Overlapping windows with stride 1.
    #[default]
    Sliding,
    /// Consecutive non-overlapping blocks of `T` rows, one per instance.
    PerInstance,
}

/// Uniform ranges for the sine generator's frequency `η` and phase `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SineParams {
    pub freq: (f64, f64),
    pub phase: (f64, f64),
}

impl Default for SineParams {
    fn default() -> Self {
        Self {
            freq: (0.0, 0.1),
            phase: (0.0, 0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ar1Params {
    pub phi: f64,
    pub noise_std: f64,
}

impl Default for Ar1Params {
    fn default() -> Self {
        Self {
            phi: 0.8,
            noise_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    Sine(#[serde(default)] SineParams),
    Ar1(#[serde(default)] Ar1Params),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf },
    Synthetic {
        #[serde(flatten)]
        generator: Generator,
        num_samples: usize,
    },
}

fn default_length() -> usize {
    24
}

fn default_split() -> (f64, f64) {
    (0.8, 0.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub channels: usize,
    #[serde(default = "default_length")]
    pub length: usize,
    pub source: DataSource,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_split")]
    pub split: (f64, f64),
    #[serde(default)]
    pub windowing: Windowing,
    /// Seeds synthetic generation and the train/test shuffle.
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("dataset name is empty".into()));
        }
        if self.channels == 0 || self.length < 2 {
            return Err(Error::Config(format!(
                "dataset {}: need channels >= 1 and length >= 2",
                self.name
            )));
        }
        let (tr, te) = self.split;
        if tr <= 0.0 || te < 0.0 || (tr + te - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "dataset {}: split fractions must be positive and sum to 1",
                self.name
            )));
        }
        if let DataSource::Synthetic { num_samples, .. } = &self.source {
            if *num_samples == 0 {
                return Err(Error::Config(format!("dataset {}: num_samples is 0", self.name)));
            }
        }
        Ok(())
    }
}

/// JSON list of dataset specs; relative CSV paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub datasets: Vec<DatasetSpec>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.resolve_paths(base);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for spec in &mut self.datasets {
            if let DataSource::Csv { path } = &mut spec.source {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for spec in &self.datasets {
            spec.validate()?;
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::Config(format!("dataset {} listed twice", spec.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.name == name)
    }
}

/// Per-channel affine map `x ↦ (x − offset) · scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    /// Statistics over every valid step of `series`; zero-range channels get scale 0.
    pub fn fit(series: &[TimeSeries], kind: Normalization) -> Result<Self> {
        let d = series
            .first()
            .map(TimeSeries::channels)
            .ok_or_else(|| Error::InsufficientData("no series to fit normalisation on".into()))?;
        let mut offset = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for c in 0..d {
            let vals = series.iter().flat_map(|s| {
                s.values
                    .column(c)
                    .into_iter()
                    .zip(&s.valid_mask)
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| *v)
                    .collect::<Vec<_>>()
            });
            let vals: Vec<f64> = vals.collect();
            match kind {
                Normalization::Minmax => {
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    offset.push(lo);
                    scale.push(if hi > lo { 1.0 / (hi - lo) } else { 0.0 });
                }
                Normalization::Zscore => {
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    offset.push(mean);
                    scale.push(if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 });
                }
            }
        }
        Ok(Self { offset, scale })
    }

    pub fn apply(&self, series: &mut TimeSeries) {
        for (c, mut col) in series.values.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.offset[c]) * self.scale[c]);
        }
    }

    pub fn invert(&self, series: &mut TimeSeries) {
        for (c, mut col) in series.values.axis_iter_mut(Axis(1)).enumerate() {
            let s = self.scale[c];
            col.mapv_inplace(|v| if s > 0.0 { v / s + self.offset[c] } else { self.offset[c] });
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub train: Vec<TimeSeries>,
    pub test: Vec<TimeSeries>,
    pub stats: NormStats,
}

/// Reads a CSV with a header of channel names and one row per time step.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(Error::Parse(format!("{}: empty header", path.display())));
    }
    let mut flat = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if record.len() != header.len() {
            return Err(Error::Parse(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                r + 2,
                record.len(),
                header.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: row {}, column {:?}: cannot parse {:?}",
                    path.display(),
                    r + 2,
                    header[c],
                    field
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "{}: row {}, column {:?}: non-finite value",
                    path.display(),
                    r + 2,
                    header[c]
                )));
            }
            flat.push(v);
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, header.len()), flat).map_err(|e| Error::Parse(e.to_string()))?;
    Ok((header, values))
}

/// Cuts a `[rows × d]` matrix into length-`len` windows.
pub fn window(values: &Array2<f64>, len: usize, windowing: Windowing, dataset_id: &str) -> Result<Vec<TimeSeries>> {
    let rows = values.nrows();
    if len == 0 || rows < len {
        return Err(Error::InsufficientData(format!(
            "{dataset_id}: {rows} rows cannot fill a window of {len}"
        )));
    }
    let stride = match windowing {
        Windowing::Sliding => 1,
        Windowing::PerInstance => len,
    };
    Ok((0..=rows - len)
        .step_by(stride)
        .map(|start| TimeSeries::new(values.slice(ndarray::s![start..start + len, ..]).to_owned(), dataset_id))
        .collect())
}

/// Draws `(η, θ)` per channel for one sine sample.
pub fn draw_sine_params<R: Rng>(rng: &mut R, channels: usize, params: &SineParams) -> Vec<(f64, f64)> {
    let freq = Uniform::new_inclusive(params.freq.0, params.freq.1).expect("freq range");
    let phase = Uniform::new_inclusive(params.phase.0, params.phase.1).expect("phase range");
    (0..channels).map(|_| (freq.sample(rng), phase.sample(rng))).collect()
}

/// `x_t(j) = sin(η_j t + θ_j)` rescaled from `[−1, 1]` to `[0, 1]`.
pub fn sine_from_params(len: usize, params: &[(f64, f64)], dataset_id: &str) -> TimeSeries {
    let values = Array2::from_shape_fn((len, params.len()), |(t, c)| {
        let (eta, theta) = params[c];
        ((eta * t as f64 + theta).sin() + 1.0) / 2.0
    });
    TimeSeries::new(values, dataset_id)
}

pub fn generate_sine_with<R: Rng>(
    num_samples: usize,
    len: usize,
    channels: usize,
    params: &SineParams,
    rng: &mut R,
    dataset_id: &str,
) -> Vec<TimeSeries> {
    (0..num_samples)
        .map(|_| {
            let p = draw_sine_params(rng, channels, params);
            sine_from_params(len, &p, dataset_id)
        })
        .collect()
}

/// The standard sine benchmark with `η, θ ~ U[0, 0.1]`.
pub fn generate_sine<R: Rng>(num_samples: usize, len: usize, channels: usize, rng: &mut R) -> Vec<TimeSeries> {
    generate_sine_with(num_samples, len, channels, &SineParams::default(), rng, "sine")
}

/// Independent stationary AR(1) channels `x_t = φ x_{t−1} + σ ε_t`.
pub fn generate_ar1<R: Rng>(
    num_samples: usize,
    len: usize,
    channels: usize,
    params: &Ar1Params,
    rng: &mut R,
    dataset_id: &str,
) -> Result<Vec<TimeSeries>> {
    if params.phi.abs() >= 1.0 || params.noise_std < 0.0 {
        return Err(Error::Config("AR(1) needs |phi| < 1 and noise_std >= 0".into()));
    }
    let stationary = params.noise_std / (1.0 - params.phi * params.phi).sqrt();
    let init = Normal::new(0.0, stationary).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..num_samples)
        .map(|_| {
            let mut values = Array2::zeros((len, channels));
            for c in 0..channels {
                let mut x = init.sample(rng);
                for t in 0..len {
                    if t > 0 {
                        let z: f64 = StandardNormal.sample(rng);
                        x = params.phi * x + params.noise_std * z;
                    }
                    values[[t, c]] = x;
                }
            }
            TimeSeries::new(values, dataset_id)
        })
        .collect())
}

fn raw_windows(spec: &DatasetSpec) -> Result<Vec<TimeSeries>> {
    match &spec.source {
        DataSource::Csv { path } => {
            let (header, values) = read_csv(path)?;
            if header.len() != spec.channels {
                return Err(Error::Config(format!(
                    "dataset {}: CSV has {} channels, spec says {}",
                    spec.name,
                    header.len(),
                    spec.channels
                )));
            }
            window(&values, spec.length, spec.windowing, &spec.name)
        }
        DataSource::Synthetic { generator, num_samples } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("generate/{}", spec.name)));
            match generator {
                Generator::Sine(p) => Ok(generate_sine_with(
                    *num_samples,
                    spec.length,
                    spec.channels,
                    p,
                    &mut rng,
                    &spec.name,
                )),
                Generator::Ar1(p) => generate_ar1(*num_samples, spec.length, spec.channels, p, &mut rng, &spec.name),
            }
        }
    }
}

/// Loads, windows, shuffles, splits and normalises one dataset; statistics come from train only.
pub fn load_dataset(spec: &DatasetSpec) -> Result<LoadedDataset> {
    spec.validate()?;
    let mut windows = raw_windows(spec)?;
    if windows.is_empty() {
        return Err(Error::InsufficientData(format!("dataset {}: no windows", spec.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("split/{}", spec.name)));
    windows.shuffle(&mut rng);
    let n = windows.len();
    let n_train = ((spec.split.0 * n as f64).round() as usize).clamp(1, n);
    let mut test = windows.split_off(n_train);
    let mut train = windows;
    let stats = NormStats::fit(&train, spec.normalization)?;
    for s in train.iter_mut().chain(test.iter_mut()) {
        stats.apply(s);
    }
    Ok(LoadedDataset {
        name: spec.name.clone(),
        train,
        test,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum SubsetMode {
    Percentage(f64),
    FixedCount(usize),
    Full,
}

impl SubsetMode {
    pub fn count(&self, available: usize) -> Result<usize> {
        let k = match *self {
            SubsetMode::Percentage(p) => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::Config(format!("subset percentage {p} outside (0, 1]")));
                }
                ((p * available as f64).round() as usize).max(1)
            }
            SubsetMode::FixedCount(k) => k,
            SubsetMode::Full => available,
        };
        if k == 0 || k > available {
            return Err(Error::Config(format!(
                "subset of {k} requested from {available} training series"
            )));
        }
        Ok(k)
    }

    /// File-name friendly label: `count10`, `pct5`, `full`.
    pub fn slug(&self) -> String {
        match *self {
            SubsetMode::Percentage(p) => format!("pct{}", (p * 100.0 * 1e6).round() / 1e6),
            SubsetMode::FixedCount(k) => format!("count{k}"),
            SubsetMode::Full => "full".into(),
        }
    }

    /// Left-to-right plotting position: fixed counts, then percentages, then full.
    pub fn order_key(&self) -> (u8, u64) {
        match *self {
            SubsetMode::FixedCount(k) => (0, k as u64),
            SubsetMode::Percentage(p) => (1, (p * 1e6).round() as u64),
            SubsetMode::Full => (2, 0),
        }
    }
}

impl fmt::Display for SubsetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetMode::Percentage(p) => write!(f, "{}%", (p * 100.0 * 1e6).round() / 1e6),
            SubsetMode::FixedCount(k) => write!(f, "#{k}"),
            SubsetMode::Full => write!(f, "100%"),
        }
    }
}

impl FromStr for SubsetMode {
    type Err = Error;

    /// `pct:0.05`, `count:25` or `full`; the labels `5%`, `#25`, `100%` are also accepted.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse subset {s:?}; expected pct:<p>, count:<k> or full"));
        if s == "full" || s == "100%" {
            return Ok(SubsetMode::Full);
        }
        if let Some(v) = s.strip_prefix("pct:") {
            return v.parse().map(SubsetMode::Percentage).map_err(|_| bad());
        }
        if let Some(v) = s.strip_prefix("count:").or_else(|| s.strip_prefix('#')) {
            return v.parse().map(SubsetMode::FixedCount).map_err(|_| bad());
        }
        if let Some(v) = s.strip_suffix('%') {
            return v
                .parse::<f64>()
                .map(|p| SubsetMode::Percentage(p / 100.0))
                .map_err(|_| bad());
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    #[serde(flatten)]
    pub mode: SubsetMode,
    #[serde(default)]
    pub seed: u64,
}

/// Sorted train indices chosen uniformly without replacement.
pub fn subsample_indices(available: usize, spec: &SubsetSpec) -> Result<Vec<usize>> {
    let k = spec.mode.count(available)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "subsample"));
    let mut idx = index::sample(&mut rng, available, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn subsample(train: &[TimeSeries], spec: &SubsetSpec) -> Result<Vec<TimeSeries>> {
    Ok(subsample_indices(train.len(), spec)?
        .into_iter()
        .map(|i| train[i].clone())
        .collect())
}
