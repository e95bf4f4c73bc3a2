use kpx::network::{ArchitectureConfig, Model, RunMode};
use kpx::tensor::ParamKind;
use kpx::train::*;
use kpx::KpxError;

fn small_seg(seed: u64, train: usize, val: usize) -> Dataset {
    let mut spec = SyntheticSpec::segmentation(0.0, seed);
    spec.points_per_cloud = 1200;
    spec.train_clouds = train;
    spec.val_clouds = val;
    synth_generate(&spec).unwrap()
}

fn truncated(s: &Sample, n: usize) -> Sample {
    Sample {
        points: s.points[..n].to_vec(),
        labels: s.labels[..n].to_vec(),
    }
}

fn grads(model: &Model<f64>) -> Vec<f64> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.clone())
        .collect()
}

#[test]
fn accumulated_gradients_equal_one_big_batch() {
    let data = small_seg(0, 4, 1);
    let n = data.train.iter().map(|s| s.points.len()).min().unwrap();
    let samples: Vec<Sample> = data.train.iter().map(|s| truncated(s, n)).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = ArchitectureConfig::preset("tiny-seg").unwrap();
    let mut model = Model::<f64>::new(cfg, 3).unwrap();
    let frozen = || RunMode {
        norm_training: false,
        rng: None,
    };

    model.store.zero_grad();
    let full = make_batch(&refs, Task::Segmentation, 2, None).unwrap();
    micro_step(&mut model, &full, 0.0, 1.0, &mut frozen()).unwrap();
    let big = grads(&model);

    model.store.zero_grad();
    for pair in refs.chunks(2) {
        let b = make_batch(pair, Task::Segmentation, 2, None).unwrap();
        micro_step(&mut model, &b, 0.0, 0.5, &mut frozen()).unwrap();
    }
    let acc = grads(&model);
    let worst = big.iter().zip(&acc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
    assert!(big.iter().any(|&v| v != 0.0));
}

#[test]
fn lr_schedule_at_decay_multiples() {
    let cfg = OptimizerConfig::default();
    assert_eq!(lr_schedule(0.0, &cfg), cfg.lr);
    for k in 1..4 {
        let got = lr_schedule(60.0 * k as f64, &cfg);
        let want = cfg.lr * 0.1f64.powi(k);
        assert!((got - want).abs() / want < 1e-12, "{k}: {got} vs {want}");
    }
    let mid = lr_schedule(30.0, &cfg);
    assert!((mid - cfg.lr * 0.1f64.sqrt()).abs() < 1e-15);
}

#[test]
fn single_vote_equals_plain_prediction() {
    let data = small_seg(1, 1, 2);
    let mut model = Model::<f64>::new(ArchitectureConfig::preset("tiny-seg").unwrap(), 4).unwrap();
    let eval = evaluate_voting(&mut model, &data.val, Task::Segmentation, 4, 1).unwrap();
    let mut confusion = ConfusionMatrix::new(4);
    for s in &data.val {
        let b = make_batch(&[s], Task::Segmentation, 2, None).unwrap();
        let logits = model.predict(&b.cloud).unwrap();
        for (i, &t) in s.labels.iter().enumerate() {
            let row = logits.row(i);
            let arg = (0..4).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            confusion.add(t, arg);
        }
    }
    assert_eq!(eval.confusion, confusion);
    assert!(evaluate_voting(&mut model, &data.val, Task::Segmentation, 4, 0).is_err());
}

#[test]
fn hand_confusion_matrix() {
    let m = ConfusionMatrix::from_rows(&[vec![2, 1], vec![0, 1]]);
    assert!((m.mean_iou() - 7.0 / 12.0).abs() < 1e-12);
    assert!((m.overall_accuracy() - 0.75).abs() < 1e-12);
}

fn quick_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.optimizer.epochs = epochs;
    cfg.optimizer.steps_per_epoch = 2;
    cfg.optimizer.accumulation = 2;
    cfg.batch_clouds = 2;
    cfg
}

#[test]
fn training_is_deterministic() {
    let data = small_seg(2, 4, 1);
    let run = || {
        let mut model = Model::<f32>::new(ArchitectureConfig::preset("tiny-seg").unwrap(), 5).unwrap();
        let mut log = Vec::new();
        let report = train_loop(&mut model, &data, &quick_config(2), 11, Some(&mut log)).unwrap();
        let values: Vec<f32> = model.store.iter().flat_map(|(_, p)| p.value.clone()).collect();
        (report, values, String::from_utf8(log).unwrap())
    };
    let (r1, v1, l1) = run();
    let (r2, v2, l2) = run();
    assert_eq!(r1, r2);
    assert_eq!(v1, v2);
    assert_eq!(l1, l2);
    assert!(l1.starts_with(EpochLog::CSV_HEADER));
    assert_eq!(l1.lines().count(), 3);
    assert_eq!(r1.epochs[1].step, 4);
}

#[test]
fn training_reduces_the_loss() {
    let data = small_seg(3, 8, 1);
    let mut model = Model::<f32>::new(ArchitectureConfig::preset("tiny-seg").unwrap(), 6).unwrap();
    let report = train_loop(&mut model, &data, &quick_config(6), 0, None).unwrap();
    let first = report.epochs[0].loss;
    let last = report.epochs.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn classification_training_runs() {
    let mut spec = SyntheticSpec::classification(0.0, 0);
    spec.train_clouds = 4;
    spec.val_clouds = 4;
    spec.points_per_cloud = 600;
    let data = synth_generate(&spec).unwrap();
    let arch = ArchitectureConfig::preset("tiny-cls").unwrap();
    let mut model = Model::<f32>::new(arch, 0).unwrap();
    let mut cfg = quick_config(1);
    cfg.augment.unit_sphere = true;
    let report = train_loop(&mut model, &data, &cfg, 0, None).unwrap();
    assert!(report.epochs[0].loss.is_finite());
    let eval = evaluate_voting(&mut model, &data.val, Task::Classification, 4, 3).unwrap();
    assert_eq!(eval.confusion.total(), 4);
}

#[test]
fn optimizer_aborts_on_non_finite_gradients() {
    let mut model = Model::<f64>::new(ArchitectureConfig::preset("tiny-seg").unwrap(), 0).unwrap();
    let mut opt = AdamW::new(&model.store, OptimizerConfig::default());
    let before: Vec<f64> = model.store.iter().flat_map(|(_, p)| p.value.clone()).collect();
    let (name, id) = model
        .store
        .iter()
        .find(|(_, p)| p.kind == ParamKind::Linear)
        .map(|(id, p)| (p.name.clone(), id))
        .unwrap();
    model.store.get_mut(id).grad[0] = f64::NAN;
    let err = opt.step(&mut model.store, 1e-3).unwrap_err();
    assert!(err.to_string().contains(&name), "{err}");
    let after: Vec<f64> = model.store.iter().flat_map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn synthetic_data_is_balanced_and_reproducible() {
    let a = synth_generate(&SyntheticSpec::segmentation(0.005, 9)).unwrap();
    let b = synth_generate(&SyntheticSpec::segmentation(0.005, 9)).unwrap();
    assert_eq!(a.train[0].points, b.train[0].points);
    let h = a.histogram();
    let total: usize = h.iter().sum();
    for &c in &h {
        assert!((c as f64 / total as f64 - 0.25).abs() < 0.05, "{h:?}");
    }
    let c = synth_generate(&SyntheticSpec::segmentation(0.005, 10)).unwrap();
    assert_ne!(a.train[0].points, c.train[0].points);
}

#[test]
fn augmentation_contracts() {
    let data = small_seg(4, 1, 1);
    let s = &data.train[0];
    let cloud = kpx::sampling::StackedCloud::single(s.points.clone(), vec![], 0, None).unwrap();
    assert_eq!(augment(&cloud, &AugmentationConfig::identity(), 5), cloud);
    let mut rot = AugmentationConfig::identity();
    rot.rotate = true;
    let out = augment(&cloud, &rot, 5);
    let d = |p: [f64; 3], q: [f64; 3]| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>().sqrt();
    for i in (0..cloud.len()).step_by(37) {
        for j in (0..cloud.len()).step_by(53) {
            assert!((d(cloud.points[i], cloud.points[j]) - d(out.points[i], out.points[j])).abs() < 1e-6);
        }
        assert!((cloud.points[i][2] - out.points[i][2]).abs() < 1e-12);
    }
}

#[test]
fn label_errors_are_reported() {
    let data = small_seg(5, 1, 1);
    let mut model = Model::<f64>::new(ArchitectureConfig::preset("tiny-seg").unwrap(), 0).unwrap();
    let mut b = make_batch(&[&data.train[0]], Task::Segmentation, 2, None).unwrap();
    b.targets[0] = 9;
    match micro_step(&mut model, &b, 0.0, 1.0, &mut RunMode::eval()) {
        Err(KpxError::Label { .. }) => {}
        other => panic!("{other:?}"),
    }
}
