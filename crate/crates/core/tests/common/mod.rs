#![allow(dead_code)]

use std::path::Path;

use care_core::pretrain::{Objective, PretrainConfig};
use care_core::synthworld::dataset::{generate_dataset, DatasetManifest, GenConfig};
use care_core::vlmcore::ModelConfig;

pub fn tiny_model(image_size: usize) -> ModelConfig {
    ModelConfig {
        image_size,
        patch: 8,
        d_v: 8,
        d_l: 16,
        n_layers: 1,
        n_heads: 2,
        n_latent: 2,
        enc_layers: 1,
        enc_heads: 2,
        ffn_mult: 2,
        key_dim: 16,
        frame_dec_layers: 1,
        point_hidden: 16,
        ..ModelConfig::default()
    }
}

pub fn tiny_pretrain(image_size: usize, steps: u64) -> PretrainConfig {
    PretrainConfig {
        batch_size: 4,
        steps,
        lr: 1e-3,
        objective: Objective::Multi,
        seed: 3,
        checkpoint_every: 0,
        grad_clip: 1.0,
        model: tiny_model(image_size),
    }
}

pub fn dataset(root: &Path, n: usize, image_size: usize, seed: u64) -> DatasetManifest {
    generate_dataset(
        &GenConfig {
            n_trajectories: n,
            image_size,
            seed,
            labeled_fraction: 0.2,
            probe_fraction: 0.1,
            ..GenConfig::default()
        },
        root,
    )
    .unwrap()
}
