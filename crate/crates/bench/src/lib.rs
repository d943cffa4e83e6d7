//! Shared fixtures for the benchmarks.

use fedseg::cohort::{flatten_slices, generate_cohort, GenerationProfile, SegSample};
use fedseg::models::{Architecture, ModelSpec};
use fedseg::nn::OptimizerConfig;

pub const SIDE: usize = 16;
pub const BATCH: usize = 8;

/// The network the comparison presets train.
pub fn preset_unet() -> ModelSpec {
    ModelSpec {
        architecture: Architecture::MiniUnet {
            base_channels: 4,
            depth: 2,
            dropout: 0.2,
        },
        height: SIDE,
        width: SIDE,
        optimizer: OptimizerConfig::adam(1e-3),
        batch_size: BATCH,
    }
}

/// `n` slices of the default synthetic profile.
pub fn slices(n: usize) -> Vec<SegSample> {
    let subjects = n.div_ceil(4);
    let all = flatten_slices(
        &generate_cohort(subjects, &[GenerationProfile::default()], SIDE, SIDE, 4, 7).unwrap(),
    );
    all.into_iter().take(n).collect()
}
