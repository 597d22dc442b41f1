use frontnet_core::data::{generate_scene, Scene};
use frontnet_core::train::{split_indices, train, Schedule, TrainConfig};
use frontnet_core::Error;

fn scenes(n: usize) -> Vec<Scene> {
    (0..n).map(|i| generate_scene(100 + i as u64, 224, 224, 20.0, 56).unwrap()).collect()
}

fn small() -> TrainConfig {
    let mut cfg = TrainConfig::tiny();
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.val_fraction = 0.2;
    cfg.val_patches_per_scene = 1;
    cfg
}

#[test]
fn same_seed_gives_identical_logs_and_weights() {
    let data = scenes(6);
    let cfg = small();
    let a = train(&cfg, &data, None, |_, _| Ok(())).unwrap();
    let b = train(&cfg, &data, None, |_, _| Ok(())).unwrap();
    let bits = |o: &frontnet_core::train::TrainOutcome| {
        o.epochs.iter().flat_map(|e| [e.lr, e.l_t, e.l_c, e.aux, e.total, e.val_macro_iou].map(f64::to_bits)).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.best_epoch, b.best_epoch);
    for i in 0..a.best.len() {
        let id = frontnet_core::nn::ParamId(i);
        assert_eq!(a.best.get(id).data(), b.best.get(id).data(), "{}", a.best.name(id));
    }
    assert!(a.epochs.iter().all(|e| e.total.is_finite()));
    assert_eq!(a.val_scenes.len(), 1);
}

#[test]
fn learning_rate_follows_the_closed_form() {
    let data = scenes(3);
    let mut cfg = small();
    cfg.epochs = 4;
    cfg.val_fraction = 0.0;
    let out = train(&cfg, &data, None, |_, _| Ok(())).unwrap();
    let mut want = cfg.lr0;
    for e in &out.epochs {
        assert!((e.lr - want).abs() <= 1e-12, "epoch {}: {} vs {}", e.epoch, e.lr, want);
        want *= cfg.decay;
    }
    let steps_per_epoch = out.steps.len() / cfg.epochs;
    assert!(out.steps.iter().all(|s| s.lr == out.epochs[s.epoch].lr));
    assert_eq!(steps_per_epoch, 2);
    assert_eq!(out.best_epoch, cfg.epochs - 1);
}

#[test]
fn poly_schedule_values() {
    let mut cfg = TrainConfig::tiny();
    cfg.schedule = Schedule::Poly;
    cfg.epochs = 10;
    for e in 0..10 {
        let want = cfg.lr0 * (1.0 - e as f64 / 10.0).powf(cfg.decay);
        assert!((cfg.lr_at(e) - want).abs() <= 1e-12);
    }
}

#[test]
fn exploding_run_aborts_with_non_finite() {
    let data = scenes(2);
    let mut cfg = small();
    cfg.lr0 = 1e12;
    cfg.val_fraction = 0.0;
    cfg.epochs = 5;
    match train(&cfg, &data, None, |_, _| Ok(())) {
        Err(Error::NonFinite { .. }) => {}
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.epochs)),
    }
}

#[test]
fn split_is_a_partition() {
    for (n, n_val) in [(1usize, 0usize), (7, 1), (50, 5), (200, 20)] {
        let (t, v) = split_indices(n, 0.1, 3);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert_eq!(v.len(), n_val);
    }
}
