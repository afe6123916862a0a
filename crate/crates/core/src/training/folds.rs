use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Graph-level K-fold split. Ids are sorted before the seeded shuffle, so the
/// plan does not depend on input order; fold `i` validates on the `i`-th of
/// `k` contiguous, near-equal shards.
pub fn make_folds(graph_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, TrainingError> {
    if k < 2 || graph_ids.len() < k {
        return Err(TrainingError::TooFewGraphs {
            graphs: graph_ids.len(),
            k,
        });
    }
    let mut ids = graph_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != graph_ids.len() {
        return Err(TrainingError::Config("duplicate graph ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let folds = (0..k)
        .map(|i| {
            let (lo, hi) = (i * n / k, (i + 1) * n / k);
            Fold {
                train: ids[..lo].iter().chain(&ids[hi..]).cloned().collect(),
                val: ids[lo..hi].to_vec(),
            }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

/// Fold indices with the `keep` highest validation scores, best first; equal
/// scores favour the lower index.
pub fn select_folds(scores: &[f64], keep: usize) -> Result<Vec<usize>, TrainingError> {
    if keep == 0 || scores.len() < keep {
        return Err(TrainingError::Config(format!(
            "cannot keep {keep} of {} folds",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    Ok(idx)
}
