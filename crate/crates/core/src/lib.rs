pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod dyconv;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod trainer;
pub mod ts2img;

pub use candle_core::DType;
pub use error::{Error, Result};
