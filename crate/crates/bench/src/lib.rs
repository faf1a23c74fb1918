//! Fixtures shared by the benchmarks.

use mindalign_core::dataset::{generate_dataset, normalize};
use mindalign_core::model::{ModelConfig, ModelParams};
use mindalign_core::rng;
use mindalign_core::train::{Prepared, TrainConfig};
use mindalign_core::world::{generate_world, WorldConfig, WorldSpec};
use mindalign_core::Tensor;

pub struct Fixture {
    pub world: WorldSpec,
    pub data: Prepared,
    pub params: ModelParams,
    pub cfg: TrainConfig,
}

/// Default world, one subject with two sessions, default architecture.
pub fn fixture() -> Fixture {
    let wc = WorldConfig::default();
    let world = generate_world(&wc, 0).unwrap();
    let mut ds = generate_dataset(&world, "s0", 2, 40, 0).unwrap();
    normalize(&mut ds).unwrap();
    let data = Prepared::new(&world, ds).unwrap();
    let cfg = TrainConfig::default();
    let config = ModelConfig::new(&wc, cfg.arch.clone()).unwrap();
    let params = ModelParams::init(config, &[("s0".into(), data.dataset.voxels.cols())], 0).unwrap();
    Fixture {
        world,
        data,
        params,
        cfg,
    }
}

pub fn random(shape: [usize; 2], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "bench");
    Tensor::new(shape, rng::gaussian_vec(&mut r, shape[0] * shape[1])).unwrap()
}
