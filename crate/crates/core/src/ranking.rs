//! Ranking loss and evaluation metrics.
//!
//! Scores order configurations like runtimes do: a lower score means a faster
//! predicted configuration.

use std::cmp::Ordering;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum RankingError {
    #[error("{runtimes} runtimes but {scores} scores")]
    LengthMismatch { runtimes: usize, scores: usize },
    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("k must be at least 1")]
    ZeroK,
}

fn check(r: &[f64], s: &[f64], min_len: usize) -> Result<(), RankingError> {
    if r.len() != s.len() {
        return Err(RankingError::LengthMismatch {
            runtimes: r.len(),
            scores: s.len(),
        });
    }
    if r.len() < min_len {
        return Err(RankingError::TooFew {
            needed: min_len,
            got: r.len(),
        });
    }
    if r.iter().chain(s).any(|v| !v.is_finite()) {
        return Err(RankingError::NonFinite);
    }
    Ok(())
}

/// Ordered pairs `(i, j)` with `r[i] > r[j]`, the only pairs the hinge loss sees.
pub fn active_pairs(r: &[f64]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..r.len() {
        for j in 0..r.len() {
            if r[i] > r[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// `sum_{i,j} [r_i > r_j] max(0, 1 - (s_i - s_j))`, unnormalized.
pub fn pairwise_hinge_loss(r: &[f64], s: &[f64]) -> Result<f64, RankingError> {
    check(r, s, 2)?;
    Ok(active_pairs(r)
        .into_iter()
        .map(|(i, j)| (1.0 - (s[i] - s[j])).max(0.0))
        .sum())
}

/// The same loss divided by the number of active pairs (zero when there are none).
pub fn pairwise_hinge_loss_normalized(r: &[f64], s: &[f64]) -> Result<f64, RankingError> {
    let total = pairwise_hinge_loss(r, s)?;
    let n = active_pairs(r).len();
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Records the normalized pairwise hinge loss of a `[n]` score vector on the
/// tape. Returns the loss and the normalization constant (active pair count).
pub fn hinge_loss_on_tape(
    tape: &mut Tape,
    scores: Var,
    runtimes: &[f64],
) -> Result<(Var, usize), AutodiffError> {
    if tape.shape(scores) != [runtimes.len()] {
        return Err(AutodiffError::ShapeMismatch {
            op: "pairwise_hinge_loss",
            lhs: tape.shape(scores).to_vec(),
            rhs: vec![runtimes.len()],
        });
    }
    let pairs = active_pairs(runtimes);
    if pairs.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((zero, 0));
    }
    let (hi, lo): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let s_hi = tape.gather(scores, 0, &hi)?;
    let s_lo = tape.gather(scores, 0, &lo)?;
    let diff = tape.sub(s_hi, s_lo)?;
    let neg = tape.scale(diff, -1.0)?;
    let margin = tape.add_scalar(neg, 1.0)?;
    let hinge = tape.relu(margin)?;
    let total = tape.sum(hinge)?;
    let loss = tape.scale(total, 1.0 / pairs.len() as f64)?;
    Ok((loss, pairs.len()))
}

fn tied_pairs(sorted: &[f64]) -> i64 {
    let mut total = 0i64;
    let mut run = 1i64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Counts strict inversions of `v` while merge-sorting it.
fn count_inversions(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], &mut buf[..mid]);
    inv += count_inversions(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            inv += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k2 = k + mid - i;
    buf[k2..n].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    inv
}

/// Kendall's tau (tau-a): `2 / (n (n - 1)) * sum_{i<j} sgn(s_i - s_j) sgn(r_i - r_j)`.
/// Tied pairs contribute zero. Runs in O(n log n).
pub fn kendall_tau(r: &[f64], s: &[f64]) -> Result<f64, RankingError> {
    check(r, s, 2)?;
    let n = r.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        r[a].partial_cmp(&r[b])
            .unwrap()
            .then(s[a].partial_cmp(&s[b]).unwrap())
    });
    let r_sorted: Vec<f64> = order.iter().map(|&i| r[i]).collect();
    let mut s_by_r: Vec<f64> = order.iter().map(|&i| s[i]).collect();

    let total = (n * (n - 1) / 2) as i64;
    let ties_r = tied_pairs(&r_sorted);
    let mut ties_both = 0i64;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && r_sorted[end] == r_sorted[start] {
            end += 1;
        }
        ties_both += tied_pairs(&s_by_r[start..end]);
        start = end;
    }
    let mut buf = vec![0.0; n];
    let discordant = count_inversions(&mut s_by_r, &mut buf);
    let ties_s = tied_pairs(&s_by_r);
    let sum = total - ties_r - ties_s + ties_both - 2 * discordant;
    Ok(2.0 * sum as f64 / (n as f64 * (n as f64 - 1.0)))
}

/// Indices sorted by ascending score, ties broken by index.
pub fn argsort_scores(s: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| {
        s[a].partial_cmp(&s[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// `2 - min_{i in K} r_i / min_{i in A} r_i`, where `K` holds the `k` lowest
/// scores and `A` all configurations. Equals 1 when `K` contains a fastest one.
pub fn tile_metric(r: &[f64], s: &[f64], k: usize) -> Result<f64, RankingError> {
    check(r, s, 1)?;
    if k == 0 {
        return Err(RankingError::ZeroK);
    }
    let best_all = r.iter().copied().fold(f64::INFINITY, f64::min);
    let best_top = argsort_scores(s)
        .into_iter()
        .take(k)
        .map(|i| r[i])
        .fold(f64::INFINITY, f64::min);
    Ok(2.0 - best_top / best_all)
}
