//! Fixtures shared by the benchmarks.

use occ_core::config::RunConfig;
use occ_core::model::OccModel;
use occ_core::scene::{synthesize, SceneSample};
use occ_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Default configuration with `channels` voxel features.
pub fn config(channels: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.encoder.channels = channels;
    cfg
}

pub fn model_and_scene(cfg: &RunConfig) -> (OccModel<f32>, SceneSample) {
    let model = OccModel::new(cfg.model_config(), 0).expect("valid config");
    let scene = synthesize(0, &cfg.scene_config()).expect("valid scene config");
    (model, scene)
}
