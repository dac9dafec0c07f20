//! Shared fixtures for the benchmarks.

use condense::data::{gen_images, gen_retrieval_pairs, GridConfig, RetrievalPair, Task};
use condense::model::{ModelConfig, ModelParams};

/// The toy-scale model the default config trains.
pub fn bench_model() -> (ModelConfig, ModelParams<f32>) {
    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        n_comp_tokens: 8,
        lora_rank: 16,
        lora_alpha: 32.0,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg).expect("valid bench config");
    (cfg, params)
}

/// `n` text-to-image pairs on 4x4 grids.
pub fn bench_pairs(n: usize) -> Vec<RetrievalPair> {
    let imgs = gen_images(1, n, &GridConfig::default(), "b");
    gen_retrieval_pairs(&imgs, Task::T2i, n, 0).expect("enough distinct images")
}
