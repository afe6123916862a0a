mod common;

use std::collections::HashSet;

use common::*;
use tgraph::autodiff::{Tape, Tensor};
use tgraph::dataset::CollectionKind;
use tgraph::model::{ConfigBatch, GraphInput, ModelConfig, Param};
use tgraph::preprocess::{fit_scaler, preprocess_graph, PreprocessOptions};
use tgraph::ranking::hinge_loss_on_tape;
use tgraph::training::{
    clip_grad_norm, global_norm, lr_at, make_folds, select_folds, train_fold, warmup_steps, AdamW,
    TrainConfig, TrainData, TrainingError,
};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("graph-{i:02}")).collect()
}

#[test]
fn twenty_graphs_twenty_folds_one_each() {
    let plan = make_folds(&ids(20), 20, 4).unwrap();
    assert_eq!(plan.folds.len(), 20);
    let mut seen = HashSet::new();
    for f in &plan.folds {
        assert_eq!(f.val.len(), 1);
        assert_eq!(f.train.len(), 19);
        assert!(seen.insert(f.val[0].clone()));
        assert!(!f.train.contains(&f.val[0]));
    }
    assert_eq!(seen.len(), 20);
}

#[test]
fn folds_partition_and_are_seeded() {
    let all = ids(33);
    let plan = make_folds(&all, 7, 11).unwrap();
    let mut union: Vec<String> = plan.folds.iter().flat_map(|f| f.val.clone()).collect();
    union.sort();
    assert_eq!(union, all);
    assert_eq!(plan, make_folds(&all, 7, 11).unwrap());
    let mut reversed = all.clone();
    reversed.reverse();
    assert_eq!(plan, make_folds(&reversed, 7, 11).unwrap());
    assert_ne!(plan, make_folds(&all, 7, 12).unwrap());
    assert!(matches!(
        make_folds(&ids(3), 5, 0),
        Err(TrainingError::TooFewGraphs { graphs: 3, k: 5 })
    ));
}

#[test]
fn fold_selection_examples() {
    assert_eq!(
        select_folds(&[0.5, 0.7, 0.6, 0.65, 0.62], 4).unwrap(),
        vec![1, 3, 4, 2]
    );
    assert_eq!(select_folds(&[0.3; 5], 4).unwrap(), vec![0, 1, 2, 3]);
    let mut kept = select_folds(&[0.1, 0.9, 0.4], 3).unwrap();
    kept.sort();
    assert_eq!(kept, vec![0, 1, 2]);
    assert!(select_folds(&[0.1, 0.2], 3).is_err());
}

#[test]
fn schedule_reference_points() {
    let cfg = TrainConfig::default();
    let total = 1000;
    let warm = warmup_steps(total, cfg.warmup_frac);
    assert_eq!(warm, 50);
    assert_eq!(lr_at(0, total, &cfg), 0.0);
    assert!((lr_at(25, total, &cfg) - 0.5e-3).abs() < 1e-18);
    assert_eq!(lr_at(warm, total, &cfg), 1e-3);
    assert!((lr_at(total, total, &cfg) - 1e-5).abs() < 1e-18);
    let mid = warm + (total - warm) / 2;
    let expect = 1e-5 + (1e-3 - 1e-5) * 0.5 * (1.0 + (std::f64::consts::PI * 0.5).cos());
    assert!((lr_at(mid, total, &cfg) - expect).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for s in warm..=total {
        let lr = lr_at(s, total, &cfg);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn clipping_hits_the_bound_exactly() {
    let mut g = vec![
        Tensor::from_vec(vec![300.0, -400.0]),
        Tensor::new(vec![2, 2], vec![1e3, 2e3, -3e3, 5.5]).unwrap(),
    ];
    let pre = clip_grad_norm(&mut g, 1.0);
    assert!(pre > 1.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-12);

    let mut small = vec![Tensor::from_vec(vec![0.3, 0.4])];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.3, 0.4]);
}

/// Independent AdamW recomputation for one scalar parameter.
struct RefAdam {
    m: f64,
    v: f64,
}

impl RefAdam {
    fn step(&mut self, w: f64, g: f64, lr: f64, wd: f64, t: i32) -> f64 {
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mhat = self.m / (1.0 - 0.9f64.powi(t));
        let vhat = self.v / (1.0 - 0.999f64.powi(t));
        let w = w * (1.0 - lr * wd);
        w - lr * mhat / (vhat.sqrt() + 1e-8)
    }
}

#[test]
fn adamw_matches_reference_on_a_two_parameter_toy() {
    // f(w, b) = (w - 3)^2 + (b + 1)^2; w decays, b does not.
    let mut params = vec![
        Param {
            name: "w".into(),
            value: Tensor::from_vec(vec![0.5]),
            decay: true,
        },
        Param {
            name: "b".into(),
            value: Tensor::from_vec(vec![2.0]),
            decay: false,
        },
    ];
    let wd = 0.1;
    let mut opt = AdamW::new(&params, wd);
    let (mut rw, mut rb) = (RefAdam { m: 0.0, v: 0.0 }, RefAdam { m: 0.0, v: 0.0 });
    let (mut w, mut b) = (0.5, 2.0);
    for t in 1..=10 {
        let lr = 0.05 * t as f64 / 10.0;
        let gw = 2.0 * (params[0].value.data()[0] - 3.0);
        let gb = 2.0 * (params[1].value.data()[0] + 1.0);
        opt.step(
            &mut params,
            &[Tensor::from_vec(vec![gw]), Tensor::from_vec(vec![gb])],
            lr,
        );
        w = rw.step(w, 2.0 * (w - 3.0), lr, wd, t);
        b = rb.step(b, 2.0 * (b + 1.0), lr, 0.0, t);
        assert!((params[0].value.data()[0] - w).abs() < 1e-15, "step {t}");
        assert!((params[1].value.data()[0] - b).abs() < 1e-15, "step {t}");
    }
    assert_eq!(opt.steps_taken(), 10);
    assert!(w > 0.5 && b < 2.0);
}

#[test]
fn decay_never_touches_biases_or_temperature() {
    let m = model(0);
    for p in m.params() {
        let exempt = p.name.ends_with(".bias")
            || p.name.ends_with("log_temperature")
            || p.name.ends_with("norm.beta");
        assert_eq!(p.decay, !exempt, "{}", p.name);
    }
    // A zero gradient with decay on leaves exempt parameters untouched.
    let mut params = m.params().to_vec();
    let before = params.clone();
    let zeros: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    AdamW::new(&params, 0.5).step(&mut params, &zeros, 0.1);
    for (a, b) in params.iter().zip(&before) {
        let moved = a.value != b.value;
        let nonzero = b.value.data().iter().any(|&v| v != 0.0);
        assert_eq!(moved, b.decay && nonzero, "{}", a.name);
    }
}

#[test]
fn loss_on_a_fixed_batch_decreases() {
    let file = &synthetic(3, 1, 48)[0];
    let scaler = fit_scaler(&[file], "test").unwrap();
    let input = GraphInput::new(&file.graph, &scaler).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    let batch = ConfigBatch::from_set(&file.graph, &file.configs, &idx, &scaler).unwrap();
    let runtimes: Vec<f64> = idx
        .iter()
        .map(|&i| file.configs.runtimes_ns[i] as f64)
        .collect();
    let mut m = tgraph::model::TGraphModel::new(small_config(), 12, 5).unwrap();
    let mut opt = AdamW::new(m.params(), 0.0);
    let mut losses = Vec::new();
    for _ in 0..6 {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let s = m.forward(&mut tape, &bound, &input, &batch).unwrap();
        let (loss, _) = hinge_loss_on_tape(&mut tape, s, &runtimes).unwrap();
        losses.push(tape.value(loss).item().unwrap());
        let mut grads = tape.backward(loss).unwrap();
        let g: Vec<Tensor> = bound
            .vars()
            .iter()
            .map(|&v| grads.take(v).unwrap())
            .collect();
        opt.step(m.params_mut(), &g, 1e-3);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

fn train_data(graphs: usize) -> TrainData {
    let files = synthetic(8, graphs, 24)
        .iter()
        .filter_map(|g| preprocess_graph(g, PreprocessOptions::default()))
        .collect();
    TrainData::new(
        "layout:xla:random".parse::<CollectionKind>().unwrap(),
        12,
        files,
    )
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 2.0,
        configs_per_batch: 8,
        k_folds: 3,
        folds_trained: 2,
        folds_kept: 1,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn step_log_never_names_a_validation_graph() {
    let data = train_data(7);
    let plan = make_folds(&data.graph_ids(), 3, 9).unwrap();
    let mut log = Vec::new();
    let r = train_fold(
        &data,
        &plan.folds[1],
        1,
        &small_config(),
        &quick(),
        Some(&mut log),
    )
    .unwrap();
    let text = String::from_utf8(log).unwrap();
    let mut steps = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["kind"] == "step" {
            steps += 1;
            let id = v["graph_id"].as_str().unwrap().to_string();
            assert!(!plan.folds[1].val.contains(&id));
            assert!(plan.folds[1].train.contains(&id));
        }
    }
    assert_eq!(steps, 2 * plan.folds[1].train.len());
    // The fold scaler was fitted on the fold's training graphs only.
    let scaler = &r.checkpoint.scaler;
    assert_eq!(scaler.provenance, "fold:1");
    for id in &plan.folds[1].val {
        assert!(!scaler.was_fitted_on(id));
    }
    assert_eq!(r.history.len(), 2);
    assert!(r.best_val_tau.is_finite());
}

#[test]
fn fractional_epochs_truncate_the_last_pass() {
    let data = train_data(7);
    let plan = make_folds(&data.graph_ids(), 3, 9).unwrap();
    let cfg = TrainConfig {
        epochs: 1.5,
        ..quick()
    };
    let r = train_fold(&data, &plan.folds[0], 0, &small_config(), &cfg, None).unwrap();
    let n = plan.folds[0].train.len();
    assert_eq!(r.history.len(), 2);
    assert_eq!(r.history[1].step, (1.5 * n as f64).ceil() as usize);
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = train_data(6);
    let plan = make_folds(&data.graph_ids(), 3, 9).unwrap();
    let run = || {
        train_fold(&data, &plan.folds[2], 2, &small_config(), &quick(), None)
            .unwrap()
            .checkpoint
            .to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn mode_must_fit_the_collection() {
    let data = train_data(6);
    let plan = make_folds(&data.graph_ids(), 3, 9).unwrap();
    let tile = ModelConfig {
        mode: tgraph::model::ModelMode::Tile,
        ..small_config()
    };
    assert!(matches!(
        train_fold(&data, &plan.folds[0], 0, &tile, &quick(), None),
        Err(TrainingError::Config(_))
    ));
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig {
            warmup_frac: 0.0,
            ..quick()
        },
        TrainConfig {
            folds_kept: 3,
            ..quick()
        },
        TrainConfig {
            epochs: 0.0,
            ..quick()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let tile = TrainConfig::for_collection("tile:xla".parse().unwrap());
    assert_eq!(tile.epochs, 17.5);
    assert_eq!(tile.configs_per_batch, 128);
    let nlp = TrainConfig::for_collection("layout:nlp:default".parse().unwrap());
    assert_eq!((nlp.epochs, nlp.configs_per_batch), (1000.0, 64));
}
