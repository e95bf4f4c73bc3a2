mod common;

use std::cell::RefCell;

use common::*;
use kpx::network::*;
use kpx::sampling::StackedCloud;
use kpx::tensor::{Graph, Tensor};
use kpx::train::{input_features, synth_generate, SyntheticSpec};
use kpx::KpxError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud(seed: u64, channels: usize) -> StackedCloud {
    let mut spec = SyntheticSpec::segmentation(0.0, seed);
    spec.points_per_cloud = 1500;
    spec.train_clouds = 1;
    spec.val_clouds = 1;
    let data = synth_generate(&spec).unwrap();
    let s = &data.train[0];
    StackedCloud::single(
        s.points.clone(),
        input_features(&s.points, channels).unwrap(),
        channels,
        Some(s.labels.clone()),
    )
    .unwrap()
}

fn tiny(double_shortcut: bool) -> ArchitectureConfig {
    let mut cfg = ArchitectureConfig::preset("tiny-seg").unwrap();
    cfg.double_shortcut = double_shortcut;
    cfg
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.1 * v
    }
}

/// Layer-3 contexts of a small cloud keep finite differences cheap.
const LAYER: usize = 3;

#[test]
fn dropped_residual_branch_is_identity() {
    for ds in [false, true] {
        let mut cfg = tiny(ds);
        cfg.droppath_rate = 0.999_999;
        let mut model = Model::<f64>::new(cfg, 1).unwrap();
        let c = cloud(0, 2);
        let ctxs = model.contexts(&c).unwrap();
        let n = ctxs[LAYER].points.len();
        let ch = model.config.channels_per_layer[LAYER];
        let x = random_tensor(&mut rng(3), &[n, ch], 1.0);
        let xh = random_tensor(&mut rng(4), &[n, 4 * ch], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let hv = ds.then(|| g.constant(xh.clone()));
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut mode = RunMode {
            norm_training: false,
            rng: Some(&mut r),
        };
        let (low, high) = model.run_block(&mut g, &ctxs[LAYER], LAYER, 0, xv, hv, &mut mode).unwrap();
        assert_eq!(g.value(low).data(), x.map(leaky).data());
        if ds {
            assert_eq!(g.value(high.unwrap()).data(), xh.map(leaky).data());
        } else {
            assert!(high.is_none());
        }
    }
}

#[test]
fn zero_down_projection_leaves_activated_input() {
    let mut model = Model::<f64>::new(tiny(false), 2).unwrap();
    for name in ["enc3.block1.down.w", "enc3.block1.down.b"] {
        let id = model.store.id(name).unwrap();
        model.store.get_mut(id).value.fill(0.0);
    }
    let c = cloud(1, 2);
    let ctxs = model.contexts(&c).unwrap();
    let n = ctxs[LAYER].points.len();
    let x = random_tensor(&mut rng(5), &[n, 64], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (low, _) = model
        .run_block(&mut g, &ctxs[LAYER], LAYER, 1, xv, None, &mut RunMode::eval())
        .unwrap();
    assert_eq!(g.value(low).data(), x.map(leaky).data());
}

#[test]
fn block_and_transition_gradients_match_finite_differences() {
    for (ds, norm_training) in [(false, false), (false, true), (true, false), (true, true)] {
        let model = RefCell::new(Model::<f64>::new(tiny(ds), 3).unwrap());
        let c = cloud(2, 2);
        let ctxs = model.borrow().contexts(&c).unwrap();
        let n = ctxs[LAYER].points.len();
        let mut inputs = vec![random_tensor(&mut rng(6), &[n, 64], 1.0)];
        if ds {
            inputs.push(random_tensor(&mut rng(7), &[n, 256], 1.0));
        }
        let e = grad_check(&inputs, |g, v| {
            let mut mode = RunMode {
                norm_training,
                rng: None,
            };
            let (low, high) = model
                .borrow_mut()
                .run_block(g, &ctxs[LAYER], LAYER, 1, v[0], v.get(1).copied(), &mut mode)
                .unwrap();
            let mut l = project(g, low, 1);
            if let Some(h) = high {
                let lh = project(g, h, 2);
                l = g.add(l, lh).unwrap();
            }
            l
        });
        assert!(e < 1e-4, "block ds={ds} training={norm_training}: {e}");

        let np = ctxs[LAYER - 1].points.len();
        let x = random_tensor(&mut rng(8), &[np, 48], 1.0);
        let e = grad_check(&[x], |g, v| {
            let mut mode = RunMode {
                norm_training,
                rng: None,
            };
            let y = model.borrow_mut().run_transition(g, &ctxs, LAYER, v[0], &mut mode).unwrap();
            project(g, y, 3)
        });
        assert!(e < 1e-4, "transition training={norm_training}: {e}");
    }
}

#[test]
fn droppath_keeps_the_expectation() {
    let lengths = vec![1; 100];
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0.0;
    let draws = 100;
    for _ in 0..draws {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([100, 1], 1.0));
        let (y, _) = droppath_apply(&mut g, x, &lengths, 0.1, Some(&mut r), None).unwrap();
        total += g.value(y).data().iter().sum::<f64>();
    }
    let mean = total / (100 * draws) as f64;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
}

#[test]
fn droppath_without_rng_is_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random_tensor(&mut rng(1), &[6, 3], 1.0));
    let (y, mask) = droppath_apply(&mut g, x, &[2, 4], 0.5, None, None).unwrap();
    assert_eq!(y, x);
    assert_eq!(mask.keep, vec![true, true]);
    assert!(droppath_apply(&mut g, x, &[2, 3], 0.5, None, None).is_err());
}

#[test]
fn predictions_are_probabilities_and_deterministic() {
    let mut model = Model::<f64>::new(tiny(false), 4).unwrap();
    let c = cloud(3, 2);
    let a = model.predict(&c).unwrap();
    let b = model.predict(&c).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.shape(), &[c.len(), 4]);
    let p = softmax_rows(&a);
    for i in 0..p.rows() {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.row(i).iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn batch_elements_do_not_interact() {
    for cfg in [tiny(false), tiny(true), ArchitectureConfig::preset("tiny-cls").unwrap()] {
        let cls = matches!(cfg.head, Head::Classification { .. });
        let mut model = Model::<f64>::new(cfg, 5).unwrap();
        let (a, b) = (cloud(4, 2), cloud(5, 2));
        let both = StackedCloud::stack(&[a.clone(), b.clone()]).unwrap();
        let ya = model.predict(&a).unwrap();
        let yb = model.predict(&b).unwrap();
        let y = model.predict(&both).unwrap();
        let (ra, rb) = if cls { (1, 1) } else { (a.len(), b.len()) };
        assert_eq!(y.rows(), ra + rb);
        let joined: Vec<Vec<f64>> = rows(&ya).into_iter().chain(rows(&yb)).collect();
        assert!(max_abs(&rows(&y), &joined) < 1e-9);
    }
}

#[test]
fn empty_element_is_degenerate() {
    let model = Model::<f64>::new(tiny(false), 0).unwrap();
    let mut c = cloud(6, 2);
    c.lengths = vec![c.len(), 0];
    match model.contexts(&c) {
        Err(KpxError::Degenerate { layer: 0, element: 1 }) => {}
        other => panic!("unexpected {:?}", other.map(|v| v.len())),
    }
}

#[test]
fn wrong_input_width_is_rejected() {
    let mut model = Model::<f64>::new(tiny(false), 0).unwrap();
    assert!(model.predict(&cloud(0, 5)).is_err());
}

#[test]
fn operator_swap_only_touches_modulation() {
    let mut d = tiny(false);
    d.operator = Operator::Kpconvd;
    let x = Model::<f64>::new(tiny(false), 0).unwrap();
    let d = Model::<f64>::new(d, 0).unwrap();
    let names = |m: &Model<f64>| {
        m.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.shape.clone()))
            .collect::<Vec<_>>()
    };
    let xs: Vec<_> = names(&x).into_iter().filter(|(n, _)| !n.contains(".mod.")).collect();
    assert_eq!(xs, names(&d));
    assert!(x.num_parameters() > d.num_parameters());
    assert_eq!(x.audit().modulation, x.num_parameters() - d.num_parameters());
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    // Checkpoints hold f32 values, so an f32 model round-trips exactly.
    let mut model = Model::<f32>::new(tiny(false), 7).unwrap();
    model.save(&path).unwrap();
    let mut back = Model::<f32>::load(&path).unwrap();
    let c = cloud(7, 2);
    assert_eq!(model.predict(&c).unwrap().data(), back.predict(&c).unwrap().data());
}
