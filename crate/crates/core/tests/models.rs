mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recycle_core::config::{ThetaInit, TrainConfig};
use recycle_core::eft::{EftConfig, EftLayerWeights};
use recycle_core::mixer::{Mixing, MixedModel, SourceBranch};
use recycle_core::net::{extract, Backbone, BackboneConfig};
use recycle_core::source::{finetune_source, train_independent, train_source};
use recycle_core::task::{family_task, ImageBank, SuiteDims};
use recycle_core::tensor::Tensor;

use common::{desk, quick, small_task};

fn random_adapters(backbone: &Backbone, seed: u64) -> Vec<EftLayerWeights<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    backbone
        .channel_schedule()
        .iter()
        .map(|&k| EftLayerWeights::random(k, &EftConfig::DESK, 0.1, &mut rng).unwrap())
        .collect()
}

#[test]
fn each_source_adds_one_weight_per_row() {
    let bb = desk();
    let task = small_task(0, 0, 8);
    let j = bb.config().num_layers();
    let sources: Vec<Vec<EftLayerWeights<f32>>> = (0..4).map(|s| random_adapters(&bb, s)).collect();
    let cfg = TrainConfig::default();
    let mut counts = Vec::new();
    for m in 0..=4 {
        let refs: Vec<(u32, &[EftLayerWeights<f32>])> = sources[..m].iter().enumerate().map(|(i, a)| (i as u32, a.as_slice())).collect();
        let model = MixedModel::white_box(bb.clone(), EftConfig::DESK, &refs, &task, &cfg).unwrap();
        counts.push(model.trainable_count());
    }
    for w in counts.windows(2) {
        assert_eq!(w[1] - w[0], j + 1);
    }
    let adapters: usize = bb.channel_schedule().iter().map(|&k| EftConfig::DESK.layer_params(k)).sum();
    let head = bb.feature_dim() * 3 + 3;
    assert_eq!(counts[0], adapters + head + (j + 1));
}

#[test]
fn zero_sigma_total_is_cross_entropy() {
    let bb = desk();
    let task = small_task(1, 0, 12);
    let src = random_adapters(&bb, 3);
    let cfg = TrainConfig { sigma: 0.0, ..quick(3) };
    let mut model = MixedModel::white_box(bb, EftConfig::DESK, &[(0, &src)], &task, &cfg).unwrap();
    let history = model.train(&task, &cfg).unwrap();
    for e in &history.epochs {
        assert_eq!(e.total, e.ce);
        assert!(e.dc > 0.0);
    }
}

#[test]
fn small_step_decreases_total_loss() {
    let model = common::micro_model(21);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Tensor<f64> = Tensor::randn(&[4, 4, 4, 1], 1.0, &mut rng);
    let rows = [0, 1, 2, 3];
    let labels = [1, 0, 2, 1];
    let sigma = 0.05;
    let (before, grads) = model.objective(&images, &rows, &labels, sigma).unwrap();
    let lr = 1e-4;
    let mut stepped = model.clone();
    let mut slope = 0.0;
    for (slot, g) in grads.iter().enumerate() {
        let moved = Tensor::from_fn(g.shape(), |i| model.trainable()[slot].data()[i] - lr * g.data()[i]);
        stepped.set_trainable(slot, moved).unwrap();
        slope += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let after = stepped.objective(&images, &rows, &labels, sigma).unwrap().0;
    assert!(after.total < before.total);
    let predicted = lr * slope;
    let actual = before.total - after.total;
    assert!((actual - predicted).abs() < 0.05 * predicted, "{actual} vs {predicted}");
}

#[test]
fn mixing_weights_stay_on_the_simplex() {
    let bb = desk();
    let task = small_task(0, 1, 8);
    let srcs = [random_adapters(&bb, 1), random_adapters(&bb, 2)];
    let cfg = TrainConfig { lr: 5e-2, batch_size: 4, ..quick(50) };
    let refs = [(0, srcs[0].as_slice()), (1, srcs[1].as_slice())];
    let mut model = MixedModel::white_box(bb, EftConfig::DESK, &refs, &task, &cfg).unwrap();
    let h = model.train(&task, &cfg).unwrap();
    assert_eq!(h.epochs.len(), 50);
    assert!(h.max_simplex_error <= 1e-6, "{}", h.max_simplex_error);
    assert!(h.min_lambda > 0.0);
    for e in &h.epochs {
        for row in &e.lambda {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn independent_equals_mixing_without_sources() {
    let bb = desk();
    let task = small_task(2, 0, 10);
    let cfg = quick(4);
    let (ind, h_ind) = train_independent(&task, &bb, EftConfig::DESK, &cfg).unwrap();
    let mut mix = MixedModel::white_box(bb, EftConfig::DESK, &[], &task, &cfg).unwrap();
    let h_mix = mix.train(&task, &cfg).unwrap();
    let ce = |h: &recycle_core::mixer::History| h.epochs.iter().map(|e| e.ce).collect::<Vec<_>>();
    assert_eq!(ce(&h_ind), ce(&h_mix));
    assert_eq!(ind.theta_new(), mix.theta_new());
    assert_eq!(ind.head(), mix.head());
    assert!(mix.realized_lambda().iter().all(|row| row == &[1.0]));
}

#[test]
fn training_leaves_frozen_weights_untouched() {
    let bb = desk();
    let source_task = small_task(0, 2, 10);
    let (record, _) = train_source(&source_task, &bb, EftConfig::DESK, &quick(2)).unwrap();
    let (bb_hash, src_hash) = (bb.digest(), record.digest());
    let target = small_task(0, 3, 10);
    let cfg = quick(3);
    let mut model = MixedModel::white_box(bb.clone(), EftConfig::DESK, &[(0, &record.adapters)], &target, &cfg).unwrap();
    model.train(&target, &cfg).unwrap();
    assert_eq!(model.sources()[0].adapters.as_deref(), Some(record.adapters.as_slice()));
    let (tuned, _) = finetune_source(&record, &bb, &target, &cfg).unwrap();
    assert_ne!(tuned.theta_new(), record.adapters.as_slice());
    assert_eq!(bb.digest(), bb_hash);
    assert_eq!(model.backbone().digest(), bb_hash);
    assert_eq!(tuned.backbone().digest(), bb_hash);
    assert_eq!(record.digest(), src_hash);
}

fn conv_filter(cin: usize, cout: usize, taps: &[(usize, usize, usize, usize, f32)]) -> Tensor<f32> {
    let mut w = Tensor::zeros(&[3, 3, cin, cout]);
    for &(ky, kx, ci, co, v) in taps {
        w.data_mut()[((ky * 3 + kx) * cin + ci) * cout + co] = v;
    }
    w
}

#[test]
fn extract_matches_hand_computation() {
    let config = BackboneConfig {
        image_size: 2,
        in_channels: 1,
        channels: vec![2, 2],
        pool_after: vec![],
    };
    // Layer 1: channel 0 copies the pixel, channel 1 negates it (killed by relu).
    let l1 = conv_filter(1, 2, &[(1, 1, 0, 0, 1.0), (1, 1, 0, 1, -1.0)]);
    // Layer 2: out0 = in0 + in1; out1 = 2 in0 + 0.5 * (right neighbour of in0).
    let l2 = conv_filter(2, 2, &[(1, 1, 0, 0, 1.0), (1, 1, 1, 0, 1.0), (1, 1, 0, 1, 2.0), (1, 2, 0, 1, 0.5)]);
    let bb = Backbone::from_parts("hand", config, vec![l1, l2]).unwrap();
    let eft = EftConfig::DESK;
    let adapters = bb.identity_adapters::<f32>(&eft).unwrap();
    let image = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let f = extract(&bb, &eft, &adapters, &image).unwrap();
    // out0 = x everywhere: mean 2.5. out1 = [2+1, 4, 6+2, 8]: mean 5.75.
    assert_eq!(f.data(), &[2.5, 5.75]);
    assert_eq!(f, extract(&bb, &eft, &adapters, &image).unwrap());
}

#[test]
fn separable_two_class_task_is_learned() {
    // Two classes with 100 samples each; images are replaced by a bright
    // left half versus a bright right half.
    let dims = SuiteDims { classes_per_task: 2, ..common::small_dims(100) };
    let mut task = family_task(&ImageBank::new(7, 3), 0, 4, &dims, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = 16;
    let n = task.len();
    let mut images = Tensor::zeros(&[n, s, s, 1]);
    for i in 0..n {
        let left = task.labels[i] == 0;
        for y in 0..s {
            for x in 0..s {
                let lit = (x < s / 2) == left;
                images.data_mut()[(i * s + y) * s + x] = if lit { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3);
            }
        }
    }
    // Separability oracle: sign of (left sum - right sum) classifies every sample.
    for i in 0..n {
        let img = &images.data()[i * s * s..(i + 1) * s * s];
        let margin: f32 = (0..s * s).map(|p| if p % s < s / 2 { img[p] } else { -img[p] }).sum();
        assert_eq!(margin > 0.0, task.labels[i] == 0);
    }
    task.images = images;
    let cfg = TrainConfig { theta_init: ThetaInit::Identity, ..quick(15) };
    let (model, _) = train_independent(&task, &desk(), EftConfig::DESK, &cfg).unwrap();
    let acc = model.accuracy(&task, &task.splits().train).unwrap();
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn feature_mixing_at_target_vertex_ignores_sources() {
    let bb = desk();
    let task = small_task(1, 1, 8);
    let cfg = quick(2);
    let n = task.len();
    let noise = Tensor::from_fn(&[n, bb.feature_dim()], |i| (i as f32 * 0.37).sin() * 50.0);
    let branch = SourceBranch { id: 0, adapters: None, features: noise, dc_features: None };
    let mixing = Mixing::fixed_feature_row(0.0, 1).unwrap();
    let mut mixed = MixedModel::feature_mixing(bb.clone(), EftConfig::DESK, vec![branch], mixing, 3, &TrainConfig { sigma: 0.0, ..cfg.clone() }).unwrap();
    mixed.train(&task, &TrainConfig { sigma: 0.0, ..cfg.clone() }).unwrap();
    let (alone, _) = train_independent(&task, &bb, EftConfig::DESK, &TrainConfig { sigma: 0.0, ..cfg }).unwrap();
    let all: Vec<usize> = (0..n).collect();
    assert_eq!(mixed.logits(&task.images, &all).unwrap(), alone.logits(&task.images, &all).unwrap());
}
