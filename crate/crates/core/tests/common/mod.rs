#![allow(dead_code)]

pub mod grad;
pub mod net;
pub mod oracle;
pub mod partition;
pub mod props;
pub mod repro;

use fedseg::cohort::{flatten_slices, generate_cohort, GenerationProfile, SegSample};
use fedseg::models::{Architecture, ModelSpec};
use fedseg::nn::OptimizerConfig;
use fedseg::strategies::{Federation, InstitutionData};

pub fn profile() -> GenerationProfile {
    GenerationProfile {
        lesion_count_range: [1, 2],
        lesion_radius_range: [1.5, 3.0],
        ..Default::default()
    }
}

/// Two 8×8 slices per subject.
pub fn samples(subjects: usize, seed: u64) -> Vec<SegSample> {
    flatten_slices(&generate_cohort(subjects, &[profile()], 8, 8, 2, seed).unwrap())
}

/// Institution `k` gets `sizes[k]` training subjects plus one validation subject.
pub fn federation(sizes: &[usize], seed: u64) -> Federation {
    let institutions = sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let all = samples(n + 1, seed + k as u64);
            let split = all.len() - 2;
            InstitutionData {
                id: k,
                train: all[..split].to_vec(),
                val: all[split..].to_vec(),
            }
        })
        .collect::<Vec<_>>();
    let pooled = institutions.iter().flat_map(|i| i.train.clone()).collect();
    Federation {
        institutions,
        holdout: samples(2, seed + 100),
        pooled,
    }
}

pub fn unet_spec(optimizer: OptimizerConfig, dropout: f64, batch_size: usize) -> ModelSpec {
    ModelSpec {
        architecture: Architecture::MiniUnet {
            base_channels: 2,
            depth: 1,
            dropout,
        },
        height: 8,
        width: 8,
        optimizer,
        batch_size,
    }
}
