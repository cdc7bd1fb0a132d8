//! Shared fixtures for the criterion benchmarks: small but honest models
//! and batches so per-variant numbers are comparable.

use deepscale::model::{DecoderVariant, Model, ModelConfig, TokenBatch};
use deepscale::rng::Rng;
use deepscale::train::{SyntheticTask, TaskKind, TrainConfig};

pub const VARIANTS: [DecoderVariant; 4] = [
    DecoderVariant::Baseline,
    DecoderVariant::Matt,
    DecoderVariant::MattSelf,
    DecoderVariant::AanOriginal,
];

pub fn model(decoder: DecoderVariant, layers: usize) -> Model {
    let cfg = ModelConfig {
        layers,
        dim: 64,
        ffn_dim: 256,
        heads: 4,
        decoder,
        dp_r: 0.0,
        dp_a: 0.0,
        ..ModelConfig::desk_default()
    };
    Model::build(cfg, 9000).expect("bench model builds")
}

pub fn source_batch(rows: usize, len: usize) -> TokenBatch {
    let mut rng = Rng::new(417);
    let data: Vec<Vec<usize>> = (0..rows)
        .map(|_| (0..len).map(|_| 3 + rng.below(61)).collect())
        .collect();
    TokenBatch::new(&data).expect("bench batch builds")
}

pub fn step_config() -> TrainConfig {
    TrainConfig {
        steps: 1,
        warmup: 100,
        batch_tokens: 128,
        checkpoint_interval: usize::MAX,
        ..TrainConfig::desk_default(SyntheticTask {
            kind: TaskKind::Copy,
            vocab: 64,
            min_len: 6,
            max_len: 8,
        })
    }
}
