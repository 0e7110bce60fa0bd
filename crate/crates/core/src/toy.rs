//! The standard desk-scale setup: a small random backbone over 32×32 toy
//! images and a head configuration that trains on it in seconds.

use crate::head::HeadConfig;
use crate::rng::Rng;
use crate::trainer::TrainConfig;
use crate::vit::{Backbone, ViTConfig};
use crate::Result;

pub const SIDE: usize = 32;
pub const AMPLITUDE: f64 = 0.5;
pub const TRAIN_PER_CLASS: usize = 2000;
pub const TEST_PER_CLASS: usize = 500;

/// `d = 64`, `n = 6` blocks, `8 × 8` patches, 4 heads, 32-pixel input.
pub fn vit_config() -> ViTConfig {
    ViTConfig::new(64, 6, 8, 4, SIDE)
}

/// Randomly initialized toy backbone.
pub fn backbone(seed: u64) -> Result<Backbone> {
    Backbone::random(vit_config(), &mut Rng::new(seed))
}

/// Head `d′ = 64, q = 2`, batch 32, two epochs at lr 1e-3, ξ = 0.1.
pub fn train_config(seed: u64) -> TrainConfig {
    let vit = vit_config();
    let mut c = TrainConfig::new(HeadConfig::new(vit.n, vit.d, 64, 2));
    c.batch_size = 32;
    c.epochs = 2;
    c.loss.xi = 0.1;
    c.seed = seed;
    c
}
