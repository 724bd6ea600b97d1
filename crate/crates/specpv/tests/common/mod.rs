#![allow(dead_code)]

//! Shared builders for integration tests.

use specpv::drafter::TreeTemplate;
use specpv::engine::{ComputeModel, GenerationConfig};
use specpv::kvstore::offload::OffloadCostModel;
use specpv::model::{ModelConfig, TinyTransformer};
use specpv::numerics::rope::RopeConfig;

/// Default desk-scale model (256 vocab, 64 dim, 4 layers).
pub fn tiny_model(seed: u64) -> TinyTransformer {
    TinyTransformer::init_random(ModelConfig::tiny(), seed).expect("valid config")
}

/// Four-token-vocabulary model for distribution tests.
pub fn micro_model(seed: u64) -> TinyTransformer {
    let cfg = ModelConfig {
        vocab_size: 4,
        dim: 8,
        n_layers: 1,
        n_heads: 2,
        head_dim: 4,
        ffn_dim: 16,
        rope: RopeConfig::standard(4).expect("even head dim"),
        feature_tap_layers: vec![0],
    };
    TinyTransformer::init_random(cfg, seed).expect("valid config")
}

pub fn greedy_config(template: TreeTemplate, max_new_tokens: usize) -> GenerationConfig {
    let mut cfg = GenerationConfig::greedy(template);
    cfg.max_new_tokens = max_new_tokens;
    cfg
}

pub fn default_cost() -> OffloadCostModel {
    OffloadCostModel::default()
}

pub fn default_compute() -> ComputeModel {
    ComputeModel::default()
}
