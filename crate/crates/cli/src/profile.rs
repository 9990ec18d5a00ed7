//! Adapter cost against the pre-training channel maximum.
//!
//! DyConv resizes its kernel to the data's own channel count, so its cost does
//! not depend on the maximum; the padded baseline convolves all `C_max` inputs.

use std::path::Path;

use anyhow::Result;
use fewgen_core::denoiser::{ChannelAdapter, ModelConfig};
use fewgen_core::dyconv::{flops_estimate, FlopCount, LayerSpec};
use serde::Serialize;

pub const DYCONV_CSV: &str = "flops_dyconv.csv";
pub const PADDED_CSV: &str = "flops_padded.csv";

#[derive(Debug, Clone, Serialize)]
pub struct FlopRow {
    pub adapter: &'static str,
    pub max_channels: usize,
    pub data_channels: usize,
    pub conv_flops: u64,
    pub interp_flops: u64,
    pub total_flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileReport {
    pub data_channels: usize,
    pub dyconv_constant: bool,
    pub padded_r2: f64,
    pub dyconv: Vec<FlopRow>,
    pub padded: Vec<FlopRow>,
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return if syy == 0.0 { 1.0 } else { 0.0 };
    }
    sxy * sxy / (sxx * syy)
}

fn add(a: FlopCount, b: FlopCount) -> FlopCount {
    FlopCount {
        conv: a.conv + b.conv,
        interp: a.interp + b.interp,
    }
}

/// Input plus output adapter cost for one image.
pub fn adapter_rows(model: &ModelConfig, data_channels: usize, maxima: &[usize]) -> (Vec<FlopRow>, Vec<FlopRow>) {
    let kernel = match model.adapter {
        ChannelAdapter::DyConv { kernel, .. } | ChannelAdapter::Padded { kernel, .. } => kernel,
    };
    let (b, side) = (model.base_channels, model.image_side);
    let row = |adapter, c_max, f: FlopCount| FlopRow {
        adapter,
        max_channels: c_max,
        data_channels,
        conv_flops: f.conv,
        interp_flops: f.interp,
        total_flops: f.total(),
    };
    let dy = |c_in, c_out| {
        flops_estimate(&LayerSpec::DyConv {
            kernel,
            c_in,
            c_out,
            height: side,
            width: side,
        })
    };
    let pad = |c_max, c_out| {
        flops_estimate(&LayerSpec::Padded {
            kernel,
            c_max,
            c_out,
            height: side,
            width: side,
        })
    };
    let dyconv = maxima
        .iter()
        .map(|&m| row("dyconv", m, add(dy(data_channels, b), dy(b, data_channels))))
        .collect();
    // The padded output layer produces all C_max channels and keeps the first d.
    let padded = maxima
        .iter()
        .map(|&m| row("padded", m, add(pad(m, b), pad(b, m))))
        .collect();
    (dyconv, padded)
}

fn write_csv(rows: &[FlopRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(model: &ModelConfig, data_channels: usize, maxima: &[usize], out: &Path) -> Result<ProfileReport> {
    if maxima.is_empty() || maxima.contains(&0) {
        anyhow::bail!(fewgen_core::Error::Config("--channels needs positive counts".into()));
    }
    let (dyconv, padded) = adapter_rows(model, data_channels, maxima);
    write_csv(&dyconv, &out.join(DYCONV_CSV))?;
    write_csv(&padded, &out.join(PADDED_CSV))?;
    let x: Vec<f64> = maxima.iter().map(|&m| m as f64).collect();
    let y: Vec<f64> = padded.iter().map(|r| r.total_flops as f64).collect();
    let report = ProfileReport {
        data_channels,
        dyconv_constant: dyconv.windows(2).all(|w| w[0].total_flops == w[1].total_flops),
        padded_r2: r_squared(&x, &y),
        dyconv,
        padded,
    };
    std::fs::write(out.join("profile.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
