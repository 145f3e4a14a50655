use eimcil::backbone::{Model, ModelConfig, ModelVars};
use eimcil::memory::PrototypeStore;
use eimcil::numeric::{cross_entropy, grad_check_sampled, l2_distance, Tape, Tensor};
use eimcil::seeded_rng;
use eimcil::train::{
    augment_random_rotation, loss_ce, loss_kd, loss_proto, record_objective, rotate90, total_loss,
    train_incremental_phase, train_initial, training_items, Augmentation, PhaseState, TrainConfig, TrainData,
    TrainingItem,
};
use rand::RngExt;

fn tiny() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        input_shape: [2, 6, 6],
        feature_dim: 8,
        ratio: 2,
    }
}

fn random_image(rng: &mut eimcil::Rng, shape: [usize; 3]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn randomize_adapters(model: &mut Model, seed: u64) {
    let mut rng = seeded_rng(seed);
    for b in &mut model.blocks {
        for layer in [&mut b.first, &mut b.second] {
            let a = layer.adapter_mut().unwrap();
            a.kernel
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random::<f64>() - 0.5);
            a.bias
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.2 * (rng.random::<f64>() - 0.5));
        }
    }
}

/// Phase-1 state with a two-prototype store, live random adapters and a
/// few augmented items of the new class.
fn phase_fixture() -> (PhaseState, Vec<TrainingItem>) {
    let mut model = Model::build(&tiny(), 3, 11).unwrap();
    let mut rng = seeded_rng(5);
    // fresh blocks start at exactly zero branch output, which puts every
    // ReLU on its kink; pretend the backbone was trained
    for b in &mut model.blocks {
        for v in b.second.intrinsic_kernel.data_mut() {
            *v = 0.3 * (rng.random::<f64>() - 0.5);
        }
    }
    let mut store = PrototypeStore::new(8).unwrap();
    for c in 0..2u32 {
        let p = Tensor::new(&[8], (0..8).map(|_| rng.random::<f64>()).collect()).unwrap();
        store.add_class(c, &p, 10).unwrap();
    }
    let mut state = PhaseState::begin(1, model, store, 2).unwrap();
    randomize_adapters(&mut state.model, 9);
    let k = state.model.num_classes();
    let mut items = Vec::new();
    for i in 0..3 {
        let x = random_image(&mut rng, [2, 6, 6]);
        items.extend(training_items(i, &x, 3 + i % 2, k, Augmentation::RandomSingle, &mut rng).unwrap());
    }
    (state, items)
}

#[test]
fn total_loss_is_weighted_sum_of_parts() {
    let (state, items) = phase_fixture();
    let cfg = TrainConfig::default();
    let parts = total_loss(&state.model, &state.snapshot, &state.store, &items, &cfg).unwrap();

    // independent recomputation, one term at a time
    let k = state.model.num_classes();
    let mut ce = 0.0;
    let mut kd = 0.0;
    for it in &items {
        let f = state.model.extract_features(&it.image).unwrap();
        let main = state.model.classify_features(&f).unwrap();
        let rot = eimcil::numeric::linear(
            &f,
            &state.model.rotation_head.weight,
            &state.model.rotation_head.bias,
        )
        .unwrap();
        let mut wide = main.data().to_vec();
        wide.extend_from_slice(rot.data());
        assert_eq!(wide.len(), 4 * k);
        ce += cross_entropy(&wide, it.label).unwrap();
        kd += loss_kd(&state.model, &state.snapshot, &it.image).unwrap();
    }
    let n = items.len() as f64;
    let (ce, kd) = (ce / n, kd / n);
    let proto = loss_proto(&state.model, &state.store).unwrap();
    assert!((parts.ce - ce).abs() < 1e-12);
    assert!((parts.kd - kd).abs() < 1e-12);
    assert!((parts.proto - proto).abs() < 1e-12);
    assert!((parts.total - (ce + 10.0 * kd + 10.0 * proto)).abs() < 1e-12);

    let plain = TrainConfig {
        gamma: 0.0,
        lambda: 0.0,
        ..cfg
    };
    let only_ce = total_loss(&state.model, &state.snapshot, &state.store, &items, &plain).unwrap();
    assert!((only_ce.total - only_ce.ce).abs() < 1e-15);
}

#[test]
fn kd_matches_manual_feature_passes() {
    let (state, items) = phase_fixture();
    for it in &items {
        let with = state.model.features_with(&it.image, true).unwrap();
        let without = state.snapshot.features_with(&it.image, false).unwrap();
        let oracle = l2_distance(&with, &without).unwrap();
        let got = loss_kd(&state.model, &state.snapshot, &it.image).unwrap();
        assert_eq!(got, oracle);
        assert!(got > 0.0);
    }
}

#[test]
fn proto_loss_matches_summation_oracle() {
    let (state, _) = phase_fixture();
    let w = &state.model.classifier.weight;
    let b = &state.model.classifier.bias;
    let (rows, d) = (w.shape()[0], w.shape()[1]);
    let mut oracle = 0.0;
    for (id, entry) in state.store.iter() {
        let logits: Vec<f64> = (0..rows)
            .map(|r| {
                b.data()[r]
                    + (0..d)
                        .map(|j| w.data()[r * d + j] * f64::from(entry.prototype[j]))
                        .sum::<f64>()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        oracle += lse - logits[id as usize];
    }
    assert!((loss_proto(&state.model, &state.store).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn symmetric_prototypes_contribute_equally() {
    let mut model = Model::build(&tiny(), 2, 0).unwrap();
    let w = model.classifier.weight.data_mut();
    w.iter_mut().for_each(|v| *v = 0.0);
    w[0] = 1.0; // row 0 reads feature 0
    w[8 + 1] = 1.0; // row 1 reads feature 1
    let mut store = PrototypeStore::new(8).unwrap();
    let mut p0 = vec![0.0; 8];
    p0[0] = 2.0;
    let mut p1 = vec![0.0; 8];
    p1[1] = 2.0;
    store
        .add_class(0, &Tensor::vector(p0.clone()).unwrap(), 1)
        .unwrap();
    store.add_class(1, &Tensor::vector(p1).unwrap(), 1).unwrap();
    let mut single = PrototypeStore::new(8).unwrap();
    single.add_class(0, &Tensor::vector(p0).unwrap(), 1).unwrap();
    let both = loss_proto(&model, &store).unwrap();
    let one = loss_proto(&model, &single).unwrap();
    assert!((both - 2.0 * one).abs() < 1e-15);
}

#[test]
fn total_loss_passes_gradient_check() {
    let (state, items) = phase_fixture();
    let teacher: Vec<Tensor> = items
        .iter()
        .map(|it| state.snapshot.features_with(&it.image, false).unwrap())
        .collect();
    let template = state.model.clone();
    // every tensor trainable: checks backbone paths as well as adapters
    let mut params: Vec<Tensor> = template
        .params()
        .into_iter()
        .map(|t| t.clone().trainable(true))
        .collect();
    let store = state.store.clone();
    let report = grad_check_sampled(&mut params, 1e-5, 6, |tape: &mut Tape<'_>, vars| {
        let mv = ModelVars::from_flat(&template, vars)?;
        let obj = record_objective(
            tape,
            &template,
            &mv,
            &items,
            Some(&teacher),
            Some(&store),
            10.0,
            10.0,
            true,
        )?;
        Ok(obj.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.elements_checked > 100);
}

#[test]
fn rotation_frequencies_are_uniform() {
    let mut rng = seeded_rng(42);
    let x = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        let (rotated, label) = augment_random_rotation(&x, 1, 5, &mut rng).unwrap();
        let turns = label / 5;
        assert_eq!(label % 5, 1);
        assert_eq!(rotated, rotate90(&x, turns).unwrap());
        counts[turns - 1] += 1;
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((0.30..=0.37).contains(&f), "{counts:?}");
    }
}

#[test]
fn rotation_permutes_pixels() {
    let mut rng = seeded_rng(1);
    let x = random_image(&mut rng, [3, 5, 5]);
    for t in 1..4 {
        let mut a = x.data().to_vec();
        let mut b = rotate90(&x, t).unwrap().data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }
    assert!(augment_random_rotation(&Tensor::zeros(&[1, 4, 5]), 0, 2, &mut rng).is_err());
}

/// Four classes, each a constant colour offset plus noise.
fn blobs(per_class: usize, seed: u64) -> TrainData {
    let mut rng = seeded_rng(seed);
    let centres = [[0.8, -0.8], [-0.8, 0.8], [0.8, 0.8], [-0.8, -0.8]];
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (y, c) in centres.iter().enumerate() {
        for _ in 0..per_class {
            let data = (0..72)
                .map(|i| c[i / 36] + 0.3 * (rng.random::<f64>() - 0.5))
                .collect();
            images.push(Tensor::new(&[2, 6, 6], data).unwrap());
            labels.push(y);
        }
    }
    TrainData::new(images, labels).unwrap()
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        initial_epochs: 8,
        incremental_epochs: 4,
        prune_at_epoch: 1,
        keep_ratio: 1.0,
        lr_initial: 0.05,
        lr_incremental: 0.01,
        batch_size: 4,
        augmentation: Augmentation::None,
        ..TrainConfig::default()
    }
}

#[test]
fn initial_training_fits_separable_blobs_deterministically() {
    let data = blobs(8, 3);
    let cfg = small_train_config();
    let mut a = Model::build(&tiny(), 4, 1).unwrap();
    let mut log = Vec::new();
    let steps = train_initial(&mut a, &data, &cfg, &mut log).unwrap();
    assert_eq!(steps, 8 * 8);
    assert_eq!(log.len(), 8);
    assert!(log.last().unwrap().loss.ce < log[0].loss.ce);
    let acc = eimcil::train::accuracy(&a, data.images(), data.labels()).unwrap();
    assert!(acc > 0.9, "train accuracy {acc}");

    let mut b = Model::build(&tiny(), 4, 1).unwrap();
    train_initial(&mut b, &data, &cfg, &mut Vec::new()).unwrap();
    assert_eq!(a, b);

    let empty = TrainData::new(Vec::new(), Vec::new()).unwrap();
    assert!(train_initial(&mut b, &empty, &cfg, &mut Vec::new()).is_err());
}

#[test]
fn incremental_phase_contract() {
    let data = blobs(6, 4);
    let cfg = small_train_config();
    let old = data.subset(&(0..12).collect::<Vec<_>>()); // classes 0 and 1
    let new = data.subset(&(12..24).collect::<Vec<_>>()); // classes 2 and 3
    let mut model = Model::build(&tiny(), 2, 2).unwrap();
    train_initial(&mut model, &old, &cfg, &mut Vec::new()).unwrap();
    let mut store = PrototypeStore::new(8).unwrap();
    eimcil::train::build_prototypes(&model, &old, &(0..12).collect::<Vec<_>>(), &mut store).unwrap();
    let before_params = model.param_count() - model.classifier.weight.numel() - model.classifier.bias.numel();
    let old_store = store.clone();

    let mut state = PhaseState::begin(1, model.clone(), store, 2).unwrap();
    let mut log = Vec::new();
    let report = train_incremental_phase(&mut state, &new, &cfg, &mut log).unwrap();
    assert_eq!(report.retained, (0..12).collect::<Vec<_>>());
    assert_eq!(log.len(), 4);
    let (fused, store) = state.into_parts();
    assert!(!fused.has_adapters());

    // frozen groups are untouched
    assert_eq!(fused.stem.weight.data(), model.stem.weight.data());
    assert_eq!(fused.stem.bias.data(), model.stem.bias.data());
    for (a, b) in fused.blocks.iter().zip(&model.blocks) {
        for (la, lb) in [(&a.first, &b.first), (&a.second, &b.second)] {
            assert_eq!(la.intrinsic_kernel.data(), lb.intrinsic_kernel.data());
            assert_eq!(la.intrinsic_bias.data(), lb.intrinsic_bias.data());
        }
        if let (Some(pa), Some(pb)) = (&a.projection, &b.projection) {
            assert_eq!(pa.weight.data(), pb.weight.data());
            assert_eq!(pa.bias.data(), pb.bias.data());
        }
    }
    let after_params = fused.param_count() - fused.classifier.weight.numel() - fused.classifier.bias.numel();
    assert_eq!(before_params, after_params);

    // old prototypes are bit-stable, new ones appended
    for (id, e) in old_store.iter() {
        assert_eq!(store.get(id).unwrap(), e);
    }
    assert_eq!(store.len(), 4);
    assert_eq!(store.get(3).unwrap().sample_count, 6);
}

#[test]
fn incremental_phase_rejects_bad_inputs() {
    let data = blobs(3, 4);
    let cfg = small_train_config();
    let model = Model::build(&tiny(), 2, 2).unwrap();
    let store = PrototypeStore::new(8).unwrap();
    // no adapters
    let mut state = PhaseState::begin(1, model.clone(), store.clone(), 2).unwrap();
    state.model.fuse_adapters().unwrap();
    let new = data.subset(&(6..12).collect::<Vec<_>>());
    assert!(train_incremental_phase(&mut state, &new, &cfg, &mut Vec::new()).is_err());
    // a new class without samples
    let mut state = PhaseState::begin(1, model.clone(), store.clone(), 2).unwrap();
    let only_two = data.subset(&(6..9).collect::<Vec<_>>());
    assert!(train_incremental_phase(&mut state, &only_two, &cfg, &mut Vec::new()).is_err());
    // old-class labels in phase data
    let mut state = PhaseState::begin(1, model, store, 2).unwrap();
    assert!(train_incremental_phase(&mut state, &data, &cfg, &mut Vec::new()).is_err());
}

#[test]
fn fusion_preserves_model_outputs() {
    let (mut state, items) = phase_fixture();
    let before: Vec<Tensor> = items
        .iter()
        .map(|it| state.model.classify(&it.image).unwrap())
        .collect();
    state.model.fuse_adapters().unwrap();
    for (it, b) in items.iter().zip(&before) {
        let after = state.model.classify(&it.image).unwrap();
        assert!(after.max_abs_diff(b) < 1e-10);
    }
}

#[test]
fn loss_ce_rejects_bad_label() {
    assert!(loss_ce(&[1.0, 2.0], 2).is_err());
}
