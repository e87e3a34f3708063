#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recycle_core::config::TrainConfig;
use recycle_core::eft::{EftConfig, EftLayerWeights};
use recycle_core::mixer::{Mixing, MixingSpec, MixedModel, SourceBranch};
use recycle_core::net::{Backbone, BackboneConfig, Linear};
use recycle_core::task::{family_task, ImageBank, SuiteDims, TaskSpec};
use recycle_core::tensor::Tensor;

pub fn small_dims(samples_per_class: usize) -> SuiteDims {
    SuiteDims {
        classes_per_task: 3,
        samples_per_class,
        classes_per_family: 6,
    }
}

pub fn small_task(family: u32, slot: u64, samples_per_class: usize) -> TaskSpec {
    let bank = ImageBank::new(7, 3);
    family_task(&bank, family, slot, &small_dims(samples_per_class), 7).unwrap()
}

pub fn desk() -> Backbone {
    Backbone::init("desk", BackboneConfig::desk(), 1).unwrap()
}

pub fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        epochs,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

/// Two 4-channel layers on 4x4 images, one white-box source, random
/// learned mixing logits.
pub fn micro_model(seed: u64) -> MixedModel<f64> {
    let eft = EftConfig::new(2, 1, 1).unwrap();
    let config = BackboneConfig {
        image_size: 4,
        in_channels: 1,
        channels: vec![4, 4],
        pool_after: vec![0],
    };
    let backbone = Backbone::init("micro", config, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
    let theta: Vec<EftLayerWeights<f64>> = (0..2).map(|_| EftLayerWeights::random(4, &eft, 0.5, &mut r).unwrap()).collect();
    let src: Vec<EftLayerWeights<f64>> = (0..2).map(|_| EftLayerWeights::random(4, &eft, 0.5, &mut r).unwrap()).collect();
    let head = Linear {
        weight: Tensor::randn(&[4, 3], 0.5, &mut r),
        bias: Tensor::randn(&[3], 0.5, &mut r),
    };
    let branch = SourceBranch {
        id: 0,
        adapters: Some(src),
        features: Tensor::randn(&[4, 4], 1.0, &mut r),
        dc_features: None,
    };
    let mixing = Mixing::Learned(MixingSpec::from_logits(Tensor::randn(&[3, 2], 0.5, &mut r)).unwrap());
    MixedModel::new(backbone, eft, theta, head, vec![branch], mixing, true).unwrap()
}
