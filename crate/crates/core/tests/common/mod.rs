#![allow(dead_code)]

use std::sync::OnceLock;

use latentforge_core::corpus::{generate_world, World};
use latentforge_core::lm::{pretrain, residual_rows, ModelParams, TrainConfig};
use latentforge_core::sae::{train_sae, SaeParams, SaeTrainConfig};

pub struct Fixture {
    pub world: World,
    pub model: ModelParams,
    pub saes: Vec<SaeParams>,
}

pub fn lm_config() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 8,
        lr: 3e-3,
        seed: 5,
        d: 16,
        layers: 2,
        maxlen: 24,
    }
}

pub fn sae_config() -> SaeTrainConfig {
    SaeTrainConfig {
        epochs: 20,
        expansion: 2,
        seed: 9,
        ..SaeTrainConfig::default()
    }
}

/// A small world with a briefly trained model and one SAE per layer, built
/// once per test binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let world = generate_world(11, 8, 8, 2).unwrap();
        let data = world.dataset();
        let (model, _) = pretrain(&data, world.vocab.len(), &lm_config()).unwrap();
        let saes = (1..=model.dims.layers)
            .map(|l| train_sae(&residual_rows(&model, &data.sequences, l).unwrap(), l, &sae_config()).unwrap())
            .collect();
        Fixture { world, model, saes }
    })
}
