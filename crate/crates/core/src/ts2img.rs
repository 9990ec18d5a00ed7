//! Delay embedding between masked time series and square image tensors.
//!
//! Each channel of a length-`T` series becomes an `n × n` canvas whose column
//! `i` holds the window of steps `i·m .. i·m + n` (0-based). The series is
//! zero-padded in time up to the smallest `L′ ≥ max(T, n)` with
//! `(L′ − n) mod m == 0`, giving `q = (L′ − n)/m + 1` real columns. Columns
//! `q..n` are zero and masked, as are pixels that encode padded time steps.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    /// `[T × d]`
    pub values: Array2<f64>,
    /// One flag per time step; `false` marks padding.
    pub valid_mask: Vec<bool>,
    pub dataset_id: String,
}

impl TimeSeries {
    /// A fully valid series.
    pub fn new(values: Array2<f64>, dataset_id: impl Into<String>) -> Self {
        let len = values.nrows();
        Self {
            values,
            valid_mask: vec![true; len],
            dataset_id: dataset_id.into(),
        }
    }

    pub fn with_mask(
        values: Array2<f64>,
        valid_mask: Vec<bool>,
        dataset_id: impl Into<String>,
    ) -> Result<Self> {
        let series = Self {
            values,
            valid_mask,
            dataset_id: dataset_id.into(),
        };
        series.validate()?;
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() || self.channels() == 0 {
            return Err(Error::Config(format!(
                "series must have T, d >= 1 (got T={}, d={})",
                self.len(),
                self.channels()
            )));
        }
        if self.valid_mask.len() != self.len() {
            return Err(Error::Shape(format!(
                "valid mask has {} entries for {} steps",
                self.valid_mask.len(),
                self.len()
            )));
        }
        if !self.valid_mask.iter().any(|&v| v) {
            return Err(Error::Config("series has no valid steps".into()));
        }
        for (t, row) in self.values.outer_iter().enumerate() {
            if self.valid_mask[t] && row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite value at step {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    /// Skip `m` between consecutive windows.
    #[serde(default = "default_embed")]
    pub skip: usize,
    /// Window length `n`, which is also the canvas side.
    #[serde(default = "default_embed")]
    pub window: usize,
}

fn default_embed() -> usize {
    8
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { skip: 8, window: 8 }
    }
}

/// Time padding and column count for one series length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub effective_length: usize,
    pub columns: usize,
}

impl EmbedConfig {
    pub fn new(skip: usize, window: usize) -> Result<Self> {
        let cfg = Self { skip, window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.skip == 0 || self.window == 0 {
            return Err(Error::Config(format!(
                "delay embedding needs m, n >= 1 (got m={}, n={})",
                self.skip, self.window
            )));
        }
        // With m > n some steps fall between windows and cannot be recovered.
        if self.skip > self.window {
            return Err(Error::Config(format!(
                "skip m={} exceeds window n={}; steps between windows would be dropped",
                self.skip, self.window
            )));
        }
        Ok(())
    }

    pub fn layout(&self, len: usize) -> Result<Layout> {
        self.validate()?;
        if len == 0 {
            return Err(Error::Config("series length must be >= 1".into()));
        }
        let (m, n) = (self.skip, self.window);
        let effective_length = if len <= n {
            n
        } else {
            n + (len - n).div_ceil(m) * m
        };
        let columns = (effective_length - n) / m + 1;
        if columns > n {
            return Err(Error::Config(format!(
                "length {len} needs {columns} columns but the canvas has {n} (m={m}, n={n})"
            )));
        }
        Ok(Layout {
            effective_length,
            columns,
        })
    }

    /// Longest series that fits on the canvas.
    pub fn max_length(&self) -> usize {
        self.window + (self.window - 1) * self.skip
    }

    /// Time step encoded by canvas pixel `(row, col)`, if the column is in use.
    fn step_at(&self, row: usize, col: usize, columns: usize) -> Option<usize> {
        (col < columns).then_some(col * self.skip + row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    /// `[C × n × n]`
    pub pixels: Array3<f64>,
    /// `[n × n]`, shared by every channel.
    pub valid_mask: Array2<bool>,
    pub effective_length: usize,
    pub source_length: usize,
}

impl ImageTensor {
    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

pub fn build_mask(len: usize, channels: usize, cfg: &EmbedConfig) -> Result<Array2<bool>> {
    if channels == 0 {
        return Err(Error::Config("channel count must be >= 1".into()));
    }
    let layout = cfg.layout(len)?;
    let n = cfg.window;
    Ok(Array2::from_shape_fn((n, n), |(row, col)| {
        cfg.step_at(row, col, layout.columns)
            .is_some_and(|t| t < len)
    }))
}

pub fn delay_embed(series: &TimeSeries, cfg: &EmbedConfig) -> Result<ImageTensor> {
    series.validate()?;
    let len = series.len();
    let layout = cfg.layout(len)?;
    let n = cfg.window;
    let channels = series.channels();

    let mut pixels = Array3::<f64>::zeros((channels, n, n));
    let mut valid_mask = Array2::from_elem((n, n), false);
    for col in 0..layout.columns {
        for row in 0..n {
            let t = col * cfg.skip + row;
            if t >= len || !series.valid_mask[t] {
                continue;
            }
            valid_mask[[row, col]] = true;
            for c in 0..channels {
                pixels[[c, row, col]] = series.values[[t, c]];
            }
        }
    }
    Ok(ImageTensor {
        pixels,
        valid_mask,
        effective_length: layout.effective_length,
        source_length: len,
    })
}

/// Maps an image back to the first `len` steps, averaging every valid pixel
/// that encodes a step (a single pixel when `m == n`).
pub fn inverse_delay_embed(img: &ImageTensor, cfg: &EmbedConfig, len: usize) -> Result<TimeSeries> {
    cfg.validate()?;
    let shape = img.pixels.shape();
    let (channels, rows, cols) = (shape[0], shape[1], shape[2]);
    if rows != cols {
        return Err(Error::Shape(format!("image is {rows}×{cols}, not square")));
    }
    if rows != cfg.window {
        return Err(Error::Shape(format!(
            "image side {rows} does not match window n={}",
            cfg.window
        )));
    }
    if img.valid_mask.dim() != (rows, cols) {
        return Err(Error::Shape(format!(
            "mask is {:?}, image is {rows}×{cols}",
            img.valid_mask.dim()
        )));
    }
    if channels == 0 {
        return Err(Error::Shape("image has no channels".into()));
    }
    if len == 0 || len > img.effective_length {
        return Err(Error::Shape(format!(
            "requested length {len} outside 1..={}",
            img.effective_length
        )));
    }
    let columns = cfg.layout(img.effective_length)?.columns;

    let mut sums = Array2::<f64>::zeros((len, channels));
    let mut counts = vec![0usize; len];
    for col in 0..columns {
        for row in 0..rows {
            let Some(t) = cfg.step_at(row, col, columns) else {
                continue;
            };
            if t >= len || !img.valid_mask[[row, col]] {
                continue;
            }
            counts[t] += 1;
            for c in 0..channels {
                sums[[t, c]] += img.pixels[[c, row, col]];
            }
        }
    }
    for (t, &count) in counts.iter().enumerate() {
        if count > 1 {
            sums.row_mut(t).mapv_inplace(|v| v / count as f64);
        }
    }
    let valid_mask: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    if !valid_mask.iter().any(|&v| v) {
        return Err(Error::Shape("image has no valid pixels for the requested length".into()));
    }
    Ok(TimeSeries {
        values: sums,
        valid_mask,
        dataset_id: String::new(),
    })
}
