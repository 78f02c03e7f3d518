//! Random fixtures shared by unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{FusionInput, ModelConfig, ModelParams, RegionFeature};

pub fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng, q: usize, o: usize, i: usize) -> FusionInput {
    let tok = |rng: &mut ChaCha8Rng| rng.random_range(3..cfg.vocab_size);
    FusionInput {
        question_tokens: (0..q).map(|_| tok(rng)).collect(),
        object_tags: (0..o).map(|_| tok(rng)).collect(),
        regions: (0..i)
            .map(|_| RegionFeature {
                stats: (0..cfg.visual_dims).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bbox: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            })
            .collect(),
    }
}

/// Input with random lengths within the config's limits.
pub fn random_sized_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> FusionInput {
    let q = rng.random_range(1..=cfg.max_question);
    let o = rng.random_range(0..=cfg.max_tags);
    let i = rng.random_range(1..=cfg.max_regions);
    random_input(cfg, rng, q, o, i)
}

pub fn randomize(params: &mut ModelParams<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}
