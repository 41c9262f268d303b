//! Shared fixtures for the criterion benchmarks.

use fapl_core::data::{generate_synthetic, generate_unlabeled, Sample, SynthConfig};
use fapl_core::labeling::CenterBank;
use fapl_core::trainer::BatchMember;
use fapl_core::{Dataset, ModelParams, PseudoLabel};

pub fn toy_dataset() -> Dataset {
    generate_synthetic(&SynthConfig {
        num_classes: 8,
        input_dim: 16,
        per_class: 30,
        mean_spread: 1.0,
        within_std: 1.0,
        mean_offset: 0.0,
        seed: 17,
    })
    .expect("valid config")
}

pub fn toy_unlabeled(ds: &Dataset, count: usize) -> Vec<Sample> {
    generate_unlabeled(ds, count, 1.0, 0.3, 18).expect("valid pool")
}

pub fn toy_model() -> ModelParams {
    ModelParams::new(16, &[32], 8, 23).expect("valid shape")
}

pub fn toy_bank(feature_dim: usize) -> CenterBank {
    let centers = (0..8)
        .map(|k| {
            (0..feature_dim)
                .map(|j| ((k * 31 + j * 7) % 13) as f64 / 13.0 - 0.5)
                .collect()
        })
        .collect();
    CenterBank {
        centers,
        update_rate: 0.5,
    }
}

pub fn toy_batch(ds: &Dataset, size: usize) -> Vec<BatchMember> {
    ds.samples
        .iter()
        .take(size)
        .map(|s| BatchMember {
            input: s.features.clone(),
            target: PseudoLabel::OneHot(s.label.class().unwrap()),
            center_class: s.label.class(),
        })
        .collect()
}
