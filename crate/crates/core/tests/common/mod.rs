#![allow(dead_code)]

use std::path::Path;

use relu_sparsity::harness::{CorpusSpec, ExperimentConfig, SyntheticSpec, TokenMode};
use relu_sparsity::model::ModelConfig;

/// A model small enough to train a few dozen steps in well under a second.
pub fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        total_steps: 40,
        batch_size: 4,
        metric_every: 5,
        checkpoint_every: 10,
        eval_windows: 16,
        output_dir: dir.to_path_buf(),
        corpus: CorpusSpec {
            mode: TokenMode::Byte,
            path: None,
            synthetic: Some(SyntheticSpec { seed: 1, bytes: 20_000 }),
        },
        model: ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_hidden: vec![32, 32],
            vocab_size: 256,
            seq_len: 16,
            seed: 3,
            ..ModelConfig::default()
        },
        ..ExperimentConfig::default()
    };
    c.schedule.warmup_fraction = 0.1;
    c.schedule.peak_lr = 1e-2;
    c
}
