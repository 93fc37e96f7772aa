mod common;

use common::*;
use nextloc::autodiff::Tape;
use nextloc::data::Split;
use nextloc::model::{cross_entropy, Model};
use nextloc::train::*;
use nextloc::Error;

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let corpus = small_corpus(1).subset(&["a"]).unwrap();
    let model = Model::new(tiny_model(), 3).unwrap();
    let before = model.store.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        batch_size: 1000,
        ..quick(3)
    };
    let out = train_loop(model, &corpus, &cfg).unwrap();
    assert_eq!(out.opt.step, 1);
    assert_eq!(out.model.store, before);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let corpus = small_corpus(2);
    let run = || {
        let out = train_loop(Model::new(tiny_model(), 5).unwrap(), &corpus, &quick(5)).unwrap();
        metrics_csv(&out.history)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.starts_with("epoch,split,city,loss,acc1,acc3,acc5\n"));
    assert!(a.contains("\n1,val,all,"));
    let other = metrics_csv(
        &train_loop(Model::new(tiny_model(), 6).unwrap(), &corpus, &quick(6))
            .unwrap()
            .history,
    );
    assert_ne!(a, other);
}

#[test]
fn small_step_decreases_batch_loss() {
    let corpus = small_corpus(3);
    let inputs = city_inputs(&corpus).unwrap();
    let c = &corpus.cities[0];
    let trajs: Vec<_> = c.splits.train.iter().take(4).collect();
    let batch = batch_of(&trajs).unwrap();
    let mut model = Model::new(tiny_model(), 7).unwrap();
    let eval_loss = |m: &Model| {
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape, false);
        let f = m
            .forward(&mut tape, &p, &inputs[0], &batch, None, None)
            .unwrap();
        let l = cross_entropy(&mut tape, f.logits, &f.targets).unwrap();
        tape.value(l).item()
    };
    let before = eval_loss(&model);
    let cfg = TrainConfig {
        lr: 1e-5,
        weight_decay: 0.0,
        gate_noise: false,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&model.store);
    let (step_loss, _) = train_step(&mut model, &mut opt, &inputs[0], &batch, &cfg, None).unwrap();
    assert_eq!(step_loss, before);
    assert!(eval_loss(&model) < before);
}

#[test]
fn adamw_first_step_matches_hand_computation() {
    let mut store = nextloc::nn::ParamStore::new();
    let id = store.add(
        "p",
        nextloc::autodiff::Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(),
    );
    let mut opt = AdamW::new(&store);
    let cfg = TrainConfig {
        lr: 0.1,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    opt.update(&mut store, &[vec![0.5, -0.25]], &cfg);
    // bias-corrected moments on step one are g and g^2, so the step is g/(|g|+eps)
    let expect = |p: f64, g: f64| p - 0.1 * (g / (g.abs() + 1e-8) + 0.01 * p);
    let got = store.get(id).data();
    assert!((got[0] - expect(1.0, 0.5)).abs() < 1e-15);
    assert!((got[1] - expect(-2.0, -0.25)).abs() < 1e-15);
}

#[test]
fn clipping_bounds_global_norm() {
    let mut g = vec![vec![3.0], vec![4.0, 0.0]];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    let mut small = vec![vec![0.1]];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0][0], 0.1);
}

#[test]
fn validation_mean_is_unweighted_over_cities() {
    let mk = |city: &str, loss: f64, n: usize| CityMetrics {
        city: city.into(),
        loss,
        hits: nextloc::eval::Hits { n, hits: [0; 3] },
    };
    let m = [mk("a", 1.0, 1000), mk("b", 3.0, 10), mk("c", f64::NAN, 0)];
    assert_eq!(aggregate_loss(&m), Some(2.0));
    assert_eq!(aggregate_loss(&m[2..]), None);
}

#[test]
fn stalled_validation_stops_after_patience() {
    let corpus = small_corpus(4);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 20,
        patience: 2,
        ..quick(1)
    };
    let out = train_loop(Model::new(tiny_model(), 1).unwrap(), &corpus, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.best_epoch, 1);
    assert!(out.stopped_early);
}

#[test]
fn non_finite_loss_aborts_with_numerical_error() {
    let corpus = small_corpus(5);
    let mut model = Model::new(tiny_model(), 1).unwrap();
    let id = model.store.find("loc.proj.b").unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train_loop(model, &corpus, &quick(1)).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let corpus = small_corpus(6);
    let out = train_loop(Model::new(tiny_model(), 2).unwrap(), &corpus, &quick(2)).unwrap();
    let ck = out.checkpoint(corpus.manifest_hash());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path, Some(&tiny_model())).unwrap();
    assert_eq!(back, ck);

    let inputs = city_inputs(&corpus).unwrap();
    let v0 = evaluate(&out.model, &corpus, &inputs, Split::Val, 16, None).unwrap();
    let v1 = evaluate(
        &back.model().unwrap(),
        &corpus,
        &inputs,
        Split::Val,
        16,
        None,
    )
    .unwrap();
    assert_eq!(
        aggregate_loss(&v0).unwrap().to_bits(),
        aggregate_loss(&v1).unwrap().to_bits()
    );
    assert_eq!(aggregate_loss(&v0), Some(out.best_val));

    let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
    assert!(manifest.contains("loc.enc.rank\t8x2\n"), "{manifest}");
    assert_eq!(manifest.lines().count(), 4 + ck.params.len());

    let other = nextloc::config::ModelConfig {
        layers: 2,
        ..tiny_model()
    };
    let err = Checkpoint::load(&path, Some(&other)).unwrap_err();
    assert!(err.to_string().contains("config hash mismatch"), "{err}");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes, None).is_err());
    assert!(Checkpoint::from_bytes(b"garbage!garbage!", None).is_err());
}

#[test]
fn parameter_count_does_not_depend_on_cities() {
    let corpus = small_corpus(7);
    let one = train_loop(
        Model::new(tiny_model(), 1).unwrap(),
        &corpus.subset(&["a"]).unwrap(),
        &quick(1),
    )
    .unwrap();
    let two = train_loop(Model::new(tiny_model(), 1).unwrap(), &corpus, &quick(1)).unwrap();
    assert_eq!(one.model.store.count(), two.model.store.count());
    assert_eq!(one.model.store.names(), two.model.store.names());
}

#[test]
fn invalid_config_is_rejected() {
    let corpus = small_corpus(8);
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..quick(1)
        },
        TrainConfig {
            epochs: 0,
            ..quick(1)
        },
        TrainConfig {
            beta1: 1.0,
            ..quick(1)
        },
        TrainConfig {
            lr: f64::NAN,
            ..quick(1)
        },
    ] {
        assert!(matches!(
            train_loop(Model::new(tiny_model(), 1).unwrap(), &corpus, &cfg),
            Err(Error::Config(_))
        ));
    }
}
