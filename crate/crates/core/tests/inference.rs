mod common;

use common::*;
use tgraph::autodiff::Tensor;
use tgraph::inference::{rank, score_configs, top_k, RankOptions};
use tgraph::model::{Checkpoint, CheckpointMeta, GraphInput};

fn checkpoint(seed: u64, fold: usize) -> Checkpoint {
    Checkpoint {
        model: model(seed),
        scaler: identity_scaler(),
        meta: CheckpointMeta {
            collection: "layout:xla:random".into(),
            fold,
            epoch: 1,
            seed,
            val_tau: None,
            train_graphs: vec![],
            val_graphs: vec![],
        },
    }
}

/// A checkpoint whose every score is `c`: zero output weights, bias `c`.
fn constant(c: f64, fold: usize) -> Checkpoint {
    let mut ck = checkpoint(0, fold);
    let w = ck.model.param_mut("f_out.weight").unwrap();
    w.value = Tensor::zeros(w.value.shape());
    ck.model.param_mut("f_out.bias").unwrap().value = Tensor::from_vec(vec![c]);
    ck
}

#[test]
fn constant_ensemble_averages_to_the_mean() {
    let file = random_graph(4, 9, 20);
    let cks: Vec<Checkpoint> = [1.0, 2.0, 3.0, 4.0]
        .iter()
        .enumerate()
        .map(|(i, &c)| constant(c, i))
        .collect();
    let r = rank(
        &file,
        &cks,
        RankOptions {
            n_tta: 3,
            batch: 7,
            tta_seed: 1,
        },
    )
    .unwrap();
    assert!(r.scores.iter().all(|&s| s == 2.5));
    assert_eq!(r.order, (0..20).collect::<Vec<_>>());
    assert_eq!(r.folds, vec![0, 1, 2, 3]);
}

#[test]
fn single_batch_tta_is_a_no_op() {
    let file = random_graph(5, 12, 40);
    let ck = vec![checkpoint(3, 0)];
    let one = rank(
        &file,
        &ck,
        RankOptions {
            n_tta: 1,
            batch: 128,
            tta_seed: 0,
        },
    )
    .unwrap();
    let many = rank(
        &file,
        &ck,
        RankOptions {
            n_tta: 6,
            batch: 128,
            tta_seed: 8,
        },
    )
    .unwrap();
    for (a, b) in one.scores.iter().zip(&many.scores) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(one.order, many.order);
}

#[test]
fn one_round_equals_a_plain_forward() {
    let file = random_graph(6, 10, 30);
    let ck = checkpoint(2, 0);
    for batch in [1, 7, 30, 128] {
        let r = rank(
            &file,
            std::slice::from_ref(&ck),
            RankOptions {
                n_tta: 1,
                batch,
                tta_seed: 5,
            },
        )
        .unwrap();
        let (g, b) = inputs(&file, &(0..30).collect::<Vec<_>>());
        let plain = if batch >= 30 {
            ck.model.score(&g, &b).unwrap()
        } else {
            let input = GraphInput::new(&file.graph, &ck.scaler).unwrap();
            let order: Vec<usize> = (0..30).collect();
            score_configs(&ck.model, &input, &file, &ck.scaler, &order, batch).unwrap()
        };
        assert_eq!(r.scores, plain, "batch {batch}");
    }
}

#[test]
fn ranking_is_independent_of_checkpoint_fold_labels_and_reproducible() {
    let file = random_graph(7, 10, 50);
    let cks = vec![checkpoint(1, 0), checkpoint(2, 1)];
    let opts = RankOptions {
        n_tta: 4,
        batch: 16,
        tta_seed: 3,
    };
    assert_eq!(
        rank(&file, &cks, opts).unwrap(),
        rank(&file, &cks, opts).unwrap()
    );
    assert!(rank(&file, &[], opts).is_err());
    assert!(rank(&file, &cks, RankOptions { n_tta: 0, ..opts }).is_err());
}

#[test]
fn top_k_matches_brute_force() {
    let scores = [0.4, -1.0, 0.4, 2.0, -1.0, 0.0, 0.4];
    // Brute force: repeatedly take the smallest remaining score, lowest index first.
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut expect = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for (pos, &i) in left.iter().enumerate() {
            if scores[i] < scores[left[best]] {
                best = pos;
            }
        }
        expect.push(left.remove(best));
    }
    for k in 0..=scores.len() {
        assert_eq!(top_k(&scores, k), expect[..k].to_vec());
    }
}
