#![allow(dead_code)]

use physdiff::config::{DiffusionConfig, ModelConfig};
use physdiff::data::{prepare, synth_dataset, Prepared, SynthConfig};
use physdiff::model::PhysDiff;

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 12,
        d_embedding: 4,
        d_env: 6,
        heads: 2,
        k_enc: 1,
        k_dec: 1,
        latent_hidden: 8,
        gru_hidden: 8,
        env_channels: 2,
        env_grid: 8,
        patch: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_synth() -> SynthConfig {
    SynthConfig { n_tracks: 12, min_len: 10, max_len: 12, channels: 2, grid: 8, ..SynthConfig::default() }
}

pub fn tiny_data(m: usize, n: usize, seed: u64) -> Prepared {
    prepare(synth_dataset(&tiny_synth(), seed).unwrap(), m, n, 0.6, 0.2).unwrap()
}

pub fn tiny_model(cfg: &ModelConfig, m: usize, n: usize, seed: u64) -> PhysDiff {
    let diff = DiffusionConfig { steps: 10, ..DiffusionConfig::default() };
    PhysDiff::new(cfg, &diff, m, n, seed).unwrap()
}

/// Default synthetic dataset with the usual 70/15/15 split.
pub fn prepare_default(m: usize, n: usize, seed: u64) -> Prepared {
    prepare(synth_dataset(&SynthConfig::default(), seed).unwrap(), m, n, 0.7, 0.15).unwrap()
}
