use aosense::model::*;
use aosense::Error;
use ndarray::{s, Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn full_model_gradients_match_finite_differences() {
    let r = grad_check(&ModelConfig::grad_check(), 7, 200, GradCheckScope::Full).unwrap();
    println!("{r:?}");
    assert!(r.checked >= 200);
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn head_only_gradients_are_exact() {
    let r = grad_check(&ModelConfig::grad_check(), 7, 200, GradCheckScope::HeadOnly).unwrap();
    println!("{r:?}");
    assert!(r.max_rel_err < 1e-8, "{r:?}");
}

fn random_inputs(cfg: &ModelConfig, n: usize, seed: u64) -> Array4<f64> {
    let mut r = aosense::rng::stream(seed, 0);
    Array4::from_shape_simple_fn((n, cfg.planes, cfg.d, cfg.d), || r.sample::<f64, _>(StandardNormal))
}

fn random_targets(n: usize, seed: u64) -> Array2<f64> {
    let mut r = aosense::rng::stream(seed, 1);
    Array2::from_shape_simple_fn((n, 15), || 0.05 * r.sample::<f64, _>(StandardNormal))
}

/// Fresh parameters with a random head, so outputs depend on the input.
fn live_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut p = ParamStore::<f64>::init(cfg, seed).unwrap();
    let mut r = aosense::rng::stream(seed, 2);
    for i in [p.idx.head_w, p.idx.head_b] {
        for v in p.tensors[i].data.iter_mut() {
            *v = 0.1 * r.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

/// The gradient-check miniature with dropout and stochastic depth active.
fn regularized() -> ModelConfig {
    let mut cfg = ModelConfig::grad_check();
    for s in &mut cfg.stages {
        s.dropout = 0.1;
        s.stochastic_depth = 0.1;
    }
    cfg
}

fn train_cfg(batch: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch,
        epochs,
        warmup_epochs: 1,
        lr: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn batched_forward_matches_per_sample() {
    let cfg = regularized();
    let p = live_params(&cfg, 1);
    let x = random_inputs(&cfg, 4, 2);
    let all = forward(&p, &x).unwrap();
    assert_eq!(all.dim(), (4, 15));
    for i in 0..4 {
        let one = forward(&p, &x.slice(s![i..i + 1, .., .., ..]).to_owned()).unwrap();
        for j in 0..15 {
            assert!((one[[0, j]] - all[[i, j]]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_head_predicts_the_zero_wavefront() {
    let cfg = ModelConfig::grad_check();
    let p = ParamStore::<f64>::init(&cfg, 4).unwrap();
    let zeros = Array4::zeros((2, cfg.planes, cfg.d, cfg.d));
    assert!(forward(&p, &zeros).unwrap().iter().all(|&v| v == 0.0));
    assert!(forward(&p, &random_inputs(&cfg, 2, 5)).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn evaluation_forward_is_pure() {
    let cfg = regularized();
    let p = live_params(&cfg, 6);
    let x = random_inputs(&cfg, 2, 7);
    let a = forward(&p, &x).unwrap();
    let b = forward(&p, &x).unwrap();
    assert_eq!(a, b);
    let mut r = aosense::rng::stream(1, 1);
    let (train_out, _) = forward_train(&p, &x, Some(&mut r)).unwrap();
    assert_ne!(train_out, a, "dropout should perturb the training pass");
    assert_eq!(forward(&p, &x).unwrap(), a);
}

#[test]
fn every_stage_preserves_the_input_shape() {
    let cfg = ModelConfig::grad_check();
    let p = live_params(&cfg, 8);
    let x = random_inputs(&cfg, 3, 9);
    let stages = forward_stages(&p, &x).unwrap();
    assert_eq!(stages.len(), cfg.stages.len());
    for y in &stages {
        assert_eq!(y.dim(), x.dim());
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = ModelConfig::grad_check();
    let p = live_params(&cfg, 8);
    let x = Array4::zeros((1, cfg.planes, cfg.d * 2, cfg.d * 2));
    assert!(matches!(forward(&p, &x), Err(Error::Shape(_))));
}

#[test]
fn non_finite_activations_name_the_layer() {
    let cfg = ModelConfig::grad_check();
    let p = live_params(&cfg, 8);
    let mut x = random_inputs(&cfg, 1, 10);
    x[[0, 0, 0, 0]] = f64::NAN;
    match forward(&p, &x) {
        Err(Error::Numeric { location, .. }) => assert_eq!(location, "stage0.patch"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = regularized();
    let data = Dataset {
        inputs: random_inputs(&cfg, 4, 11).mapv(|v| v as f32),
        targets: random_targets(4, 11).mapv(|v| v as f32),
    };
    let mut p = ParamStore::<f32>::init(&cfg, 12).unwrap();
    train(&mut p, &data, &train_cfg(2, 2), |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    p.save(&path).unwrap();
    let q = ParamStore::<f32>::load_for(&path, &cfg).unwrap();
    assert_eq!(p.tensors, q.tensors);
    assert_eq!(p.opt, q.opt);
    assert_eq!(p.history, q.history);
    let x = random_inputs(&cfg, 2, 13).mapv(|v| v as f32);
    let (a, b) = (forward(&p, &x).unwrap(), forward(&q, &x).unwrap());
    assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn checkpoint_for_another_config_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ParamStore::<f32>::init(&ModelConfig::grad_check(), 1).unwrap().save(&path).unwrap();
    let mut other = ModelConfig::grad_check();
    other.stages[0].layers = 2;
    assert!(matches!(ParamStore::<f32>::load_for(&path, &other), Err(Error::Shape(_))));
}

#[test]
fn one_epoch_reaches_every_tensor() {
    // The head starts at zero, so the inner tensors first see gradient on
    // the second step.
    let cfg = regularized();
    let data = Dataset {
        inputs: random_inputs(&cfg, 4, 14),
        targets: random_targets(4, 14),
    };
    let before = ParamStore::<f64>::init(&cfg, 15).unwrap();
    let mut p = before.clone();
    let report = train(&mut p, &data, &train_cfg(2, 1), |_| Ok(())).unwrap();
    assert_eq!(report.steps, 2);
    for (a, b) in before.tensors.iter().zip(&p.tensors) {
        assert_ne!(a.data, b.data, "{} did not move", a.name);
    }
}

#[test]
fn identical_seeds_give_identical_training() {
    let cfg = regularized();
    let data = Dataset {
        inputs: random_inputs(&cfg, 6, 16),
        targets: random_targets(6, 16),
    };
    let run = || fit(&data, &cfg, &train_cfg(2, 3)).unwrap().0;
    let (a, b) = (run(), run());
    assert_eq!(a.history.len(), 3);
    assert_eq!(a.history, b.history);
    assert_eq!(a.tensors, b.tensors);
}

#[test]
fn divergence_stops_with_the_last_good_parameters() {
    let cfg = ModelConfig::grad_check();
    let mut inputs = random_inputs(&cfg, 4, 17);
    inputs[[3, 1, 2, 3]] = f64::NAN;
    let data = Dataset {
        inputs,
        targets: random_targets(4, 17),
    };
    let before = ParamStore::<f64>::init(&cfg, 18).unwrap();
    let mut p = before.clone();
    let report = train(&mut p, &data, &train_cfg(4, 2), |_| Ok(())).unwrap();
    assert!(matches!(report.stop, StopReason::Diverged { step: 0, .. }), "{report:?}");
    assert_eq!(p.tensors, before.tensors);
    assert!(p.is_finite());
}

#[test]
fn single_precision_tracks_double_precision() {
    let cfg = ModelConfig::grad_check();
    let p = live_params(&cfg, 19);
    let x = random_inputs(&cfg, 2, 20);
    let a = forward(&p, &x).unwrap();
    let b = forward(&p.cast::<f32>(), &x.mapv(|v| v as f32)).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - *v as f64).abs() < 1e-4, "{u} vs {v}");
    }
}
