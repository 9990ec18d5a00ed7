//! Fixtures shared by the kernel benchmarks.

use fewgen_core::denoiser::{ChannelAdapter, Denoiser, ModelConfig, SizeVariant};
use fewgen_core::dyconv::CanonicalKernel;
use fewgen_core::ts2img::TimeSeries;
use fewgen_core::DType;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_series(len: usize, channels: usize, seed: u64) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((len, channels), |_| rng.random_range(-1.0..1.0));
    TimeSeries::new(values, "bench")
}

pub fn random_kernel(k: usize, c0: usize, c1: usize, seed: u64) -> CanonicalKernel {
    CanonicalKernel::random(k, c0, c1, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The roughly 1M-parameter desk model with one registered dataset.
pub fn desk_model() -> Denoiser {
    let cfg = ModelConfig {
        base_channels: 16,
        channel_multipliers: vec![1, 2, 2, 4],
        attention_resolutions: vec![4, 2],
        num_res_blocks: 1,
        image_side: 8,
        size_variant: SizeVariant::Custom,
        adapter: ChannelAdapter::default(),
    };
    let mut model = Denoiser::new(cfg, DType::F32, 0).expect("valid config");
    model.register_token("bench", 1).expect("fresh token");
    model
}
