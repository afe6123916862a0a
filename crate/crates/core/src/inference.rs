//! Scoring and ranking with test-time augmentation and fold ensembling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GraphFile;
use crate::model::{Checkpoint, ConfigBatch, GraphInput, ModelError, TGraphModel};
use crate::preprocess::FeatureScaler;
use crate::ranking::argsort_scores;

pub const DEFAULT_TTA: usize = 10;
pub const DEFAULT_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankOptions {
    /// Permutation rounds; round 0 keeps the original order.
    pub n_tta: usize,
    pub batch: usize,
    pub tta_seed: u64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            n_tta: DEFAULT_TTA,
            batch: DEFAULT_BATCH,
            tta_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub graph_id: String,
    /// Mean score per configuration, in input order.
    pub scores: Vec<f64>,
    /// Configuration indices from lowest (fastest predicted) to highest score.
    pub order: Vec<usize>,
    /// Folds of the checkpoints that were averaged.
    pub folds: Vec<usize>,
    pub n_tta: usize,
    pub tta_seed: u64,
    pub batch: usize,
}

/// Splits `0..n` into `ceil(n / batch)` contiguous chunks whose sizes differ
/// by at most one.
pub fn balanced_chunks(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let count = n.div_ceil(batch.max(1));
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Scores configurations `order` of `file` in balanced batches of at most
/// `batch`; the returned scores follow `order`.
pub fn score_configs(
    model: &TGraphModel,
    input: &GraphInput,
    file: &GraphFile,
    scaler: &FeatureScaler,
    order: &[usize],
    batch: usize,
) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(order.len());
    for chunk in balanced_chunks(order.len(), batch) {
        let b = ConfigBatch::from_set(&file.graph, &file.configs, &order[chunk], scaler)?;
        out.extend(model.score(input, &b)?);
    }
    Ok(out)
}

/// The TTA permutations: identity first, then seeded shuffles.
pub fn tta_permutations(n: usize, n_tta: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_tta)
        .map(|round| {
            let mut p: Vec<usize> = (0..n).collect();
            if round > 0 {
                p.shuffle(&mut rng);
            }
            p
        })
        .collect()
}

/// Averages scores over every checkpoint and TTA round, in checkpoint-major,
/// round-minor order.
pub fn rank(
    file: &GraphFile,
    checkpoints: &[Checkpoint],
    opts: RankOptions,
) -> Result<RankingResult, ModelError> {
    let graph_id = file.graph.graph_id.clone();
    if checkpoints.is_empty() {
        return Err(ModelError::Input {
            graph_id,
            msg: "no checkpoint to rank with".into(),
        });
    }
    if opts.n_tta == 0 || opts.batch == 0 {
        return Err(ModelError::Input {
            graph_id,
            msg: "n_tta and batch must be positive".into(),
        });
    }
    let n = file.configs.len();
    let perms = tta_permutations(n, opts.n_tta, opts.tta_seed);
    let mut total = vec![0.0; n];
    for ckpt in checkpoints {
        let input = GraphInput::new(&file.graph, &ckpt.scaler)?;
        for perm in &perms {
            let s = score_configs(&ckpt.model, &input, file, &ckpt.scaler, perm, opts.batch)?;
            for (&i, v) in perm.iter().zip(s) {
                total[i] += v;
            }
        }
    }
    let denom = (checkpoints.len() * opts.n_tta) as f64;
    let scores: Vec<f64> = total.iter().map(|t| t / denom).collect();
    Ok(RankingResult {
        graph_id,
        order: top_k(&scores, n),
        scores,
        folds: checkpoints.iter().map(|c| c.meta.fold).collect(),
        n_tta: opts.n_tta,
        tta_seed: opts.tta_seed,
        batch: opts.batch,
    })
}

/// Indices of the `k` lowest scores, ties broken by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order = argsort_scores(scores);
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_are_balanced() {
        let sizes =
            |n, b| -> Vec<usize> { balanced_chunks(n, b).iter().map(|r| r.len()).collect() };
        assert_eq!(sizes(200, 128), vec![100, 100]);
        assert_eq!(sizes(129, 128), vec![65, 64]);
        assert_eq!(sizes(128, 128), vec![128]);
        assert_eq!(sizes(5, 2), vec![2, 2, 1]);
        assert!(balanced_chunks(0, 4).is_empty());
    }

    #[test]
    fn first_round_is_identity() {
        let p = tta_permutations(6, 3, 9);
        assert_eq!(p[0], vec![0, 1, 2, 3, 4, 5]);
        for q in &p[1..] {
            let mut s = q.clone();
            s.sort();
            assert_eq!(s, p[0]);
        }
        assert_eq!(p, tta_permutations(6, 3, 9));
    }

    #[test]
    fn top_k_prefix() {
        let s = [0.3, -1.0, 0.3, 2.0];
        assert_eq!(top_k(&s, 1), vec![1]);
        assert_eq!(top_k(&s, 3), vec![1, 0, 2]);
        assert_eq!(top_k(&s, 10), vec![1, 0, 2, 3]);
    }
}
