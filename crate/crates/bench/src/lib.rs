//! Shared inputs for the attention benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taloc_core::taa::TaaConfig;
use taloc_core::Tensor;

/// Seeded `(q, k, v)` of shape `[t, cfg.model_dim]`.
pub fn qkv(t: usize, cfg: &TaaConfig, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Tensor::uniform(&[t, cfg.model_dim], -1.0, 1.0, &mut rng);
    (draw(), draw(), draw())
}

pub fn config(window: usize) -> TaaConfig {
    TaaConfig {
        window,
        ..TaaConfig::default()
    }
}
