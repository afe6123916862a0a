//! Optimizer, learning-rate schedule, K-fold protocol and the training loop.
//!
//! Each step trains on one graph: a batch of its configurations is sampled,
//! decompressed, scored, and the normalized pairwise hinge loss is
//! back-propagated. Validation Kendall's tau is measured after each epoch and
//! the best parameters are kept.

mod folds;
mod optim;

pub use folds::{make_folds, select_folds, Fold, FoldPlan};
pub use optim::{clip_grad_norm, global_norm, lr_at, warmup_steps, AdamW};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dataset::{
    load_dataset, load_manifest, CollectionKind, CollectionMode, DatasetError, GraphFile,
    SourceGroup,
};
use crate::inference::score_configs;
use crate::model::{
    save_checkpoint, Checkpoint, CheckpointMeta, ConfigBatch, GraphInput, ModelConfig, ModelError,
    ModelMode, TGraphModel,
};
use crate::preprocess::{fit_scaler, preprocess_graph, PreprocessError, PreprocessOptions};
use crate::ranking::{hinge_loss_on_tape, kendall_tau, RankingError};

pub const CV_SUMMARY_FILE: &str = "cv.json";

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{graphs} graphs cannot be split into {k} folds")]
    TooFewGraphs { graphs: usize, k: usize },
    #[error("fold {fold}, step {step}, graph `{graph_id}`: {detail}")]
    NonFinite {
        fold: usize,
        step: usize,
        graph_id: String,
        detail: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
}

impl TrainingError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| TrainingError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    /// Learning rate reached at the last step.
    pub lr_floor: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// May be fractional; the last epoch is then partial.
    pub epochs: f64,
    pub configs_per_batch: usize,
    pub k_folds: usize,
    pub folds_trained: usize,
    pub folds_kept: usize,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    /// Batch size when scoring validation graphs.
    pub val_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-3,
            lr_floor: 1e-5,
            warmup_frac: 0.05,
            weight_decay: 1e-5,
            grad_clip_norm: 1.0,
            epochs: 750.0,
            configs_per_batch: 128,
            k_folds: 20,
            folds_trained: 5,
            folds_kept: 4,
            seed: 0,
            val_every: 1,
            val_batch: 128,
        }
    }
}

impl TrainConfig {
    pub fn for_collection(kind: CollectionKind) -> Self {
        let epochs = match (kind.mode, kind.source) {
            (CollectionMode::Tile, _) => 17.5,
            (_, SourceGroup::Nlp) => 1000.0,
            (_, SourceGroup::Xla) => 750.0,
        };
        Self {
            epochs,
            configs_per_batch: kind.default_batch(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::Config(m));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad(format!(
                "warmup_frac {} must lie in (0, 1)",
                self.warmup_frac
            ));
        }
        if !(self.folds_kept >= 1
            && self.folds_kept <= self.folds_trained
            && self.folds_trained <= self.k_folds)
        {
            return bad(format!(
                "need 1 <= folds_kept ({}) <= folds_trained ({}) <= k_folds ({})",
                self.folds_kept, self.folds_trained, self.k_folds
            ));
        }
        if !(self.epochs > 0.0 && self.epochs.is_finite()) {
            return bad(format!("epochs {} must be positive", self.epochs));
        }
        if self.configs_per_batch < 2 {
            return bad("configs_per_batch must be at least 2".into());
        }
        if self.val_every == 0 || self.val_batch == 0 {
            return bad("val_every and val_batch must be positive".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr_peak) {
            return bad("need 0 <= lr_floor <= lr_peak and lr_peak > 0".into());
        }
        if !(self.grad_clip_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("grad_clip_norm must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// Training-ready graphs of one collection.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub kind: CollectionKind,
    pub opcode_vocab: usize,
    pub graphs: Vec<GraphFile>,
}

impl TrainData {
    /// Loads the `train` split (and a `valid` split, when the manifest lists
    /// one) of the dataset at `root`. Raw datasets are preprocessed in memory.
    pub fn load(root: &Path) -> Result<Self, TrainingError> {
        let manifest = load_manifest(root)?;
        let raw = manifest.preprocess.is_none();
        let mut graphs = Vec::new();
        for split in manifest
            .splits
            .iter()
            .filter(|s| *s == "train" || *s == "valid")
        {
            for g in load_dataset(root, split)?.graphs {
                if !raw {
                    graphs.push(g);
                } else if let Some(p) = preprocess_graph(&g, PreprocessOptions::default()) {
                    graphs.push(p);
                }
            }
        }
        Ok(Self::new(manifest.kind, manifest.opcode_vocab, graphs))
    }

    /// Keeps graphs with at least two configurations, the minimum for a
    /// ranking pair.
    pub fn new(kind: CollectionKind, opcode_vocab: usize, graphs: Vec<GraphFile>) -> Self {
        let (graphs, dropped): (Vec<_>, Vec<_>) =
            graphs.into_iter().partition(|g| g.configs.len() >= 2);
        for g in &dropped {
            warn!(
                "skipping graph `{}` with fewer than two configurations",
                g.graph.graph_id
            );
        }
        Self {
            kind,
            opcode_vocab,
            graphs,
        }
    }

    pub fn graph_ids(&self) -> Vec<String> {
        self.graphs
            .iter()
            .map(|g| g.graph.graph_id.clone())
            .collect()
    }

    fn find(&self, id: &str) -> Result<&GraphFile, TrainingError> {
        self.graphs
            .iter()
            .find(|g| g.graph.graph_id == id)
            .ok_or_else(|| TrainingError::Config(format!("fold references unknown graph `{id}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_tau: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub best_val_tau: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Parameters from the best validation epoch.
    pub checkpoint: Checkpoint,
}

/// Independent generator for one (fold, purpose) pair.
fn stream(seed: u64, fold: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 * 4 + purpose);
    rng
}

/// Draws `batch` configuration indices out of `n`: without replacement when
/// possible, with replacement otherwise.
pub fn sample_configs(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n >= batch {
        rand::seq::index::sample(rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Mean Kendall's tau over `graphs` between measured runtimes and scores.
pub fn mean_tau(
    model: &TGraphModel,
    graphs: &[(&GraphFile, GraphInput)],
    scaler: &crate::preprocess::FeatureScaler,
    batch: usize,
) -> Result<Option<f64>, TrainingError> {
    let mut taus = Vec::new();
    for (file, input) in graphs {
        let n = file.configs.len();
        if n < 2 {
            continue;
        }
        let order: Vec<usize> = (0..n).collect();
        let s = score_configs(model, input, file, scaler, &order, batch)?;
        let r: Vec<f64> = file.configs.runtimes_ns.iter().map(|&v| v as f64).collect();
        taus.push(kendall_tau(&r, &s)?);
    }
    Ok((!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64))
}

fn non_finite(fold: usize, step: usize, graph_id: &str) -> impl Fn(String) -> TrainingError + '_ {
    move |detail| TrainingError::NonFinite {
        fold,
        step,
        graph_id: graph_id.to_string(),
        detail,
    }
}

/// Trains one fold. Progress goes to `log` as JSON lines: one `step` record
/// per update (with the graph it used) and one `epoch` record per epoch.
pub fn train_fold(
    data: &TrainData,
    fold: &Fold,
    fold_index: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FoldResult, TrainingError> {
    cfg.validate()?;
    if (model_cfg.mode == ModelMode::Tile) != data.kind.is_tile() {
        return Err(TrainingError::Config(format!(
            "model mode {:?} does not fit collection {}",
            model_cfg.mode, data.kind
        )));
    }
    let train: Vec<&GraphFile> = fold
        .train
        .iter()
        .map(|id| data.find(id))
        .collect::<Result<_, _>>()?;
    let val: Vec<&GraphFile> = fold
        .val
        .iter()
        .map(|id| data.find(id))
        .collect::<Result<_, _>>()?;
    if train.is_empty() {
        return Err(TrainingError::Config(format!(
            "fold {fold_index} has no training graph"
        )));
    }
    let scaler = fit_scaler(&train, &format!("fold:{fold_index}"))?;
    let train_inputs = train
        .iter()
        .map(|g| GraphInput::new(&g.graph, &scaler))
        .collect::<Result<Vec<_>, _>>()?;
    let val_inputs: Vec<(&GraphFile, GraphInput)> = val
        .iter()
        .map(|g| Ok((*g, GraphInput::new(&g.graph, &scaler)?)))
        .collect::<Result<_, ModelError>>()?;

    let mut init_rng = stream(cfg.seed, fold_index, 0);
    let mut order_rng = stream(cfg.seed, fold_index, 1);
    let mut sample_rng = stream(cfg.seed, fold_index, 2);
    let mut model = TGraphModel::new(model_cfg.clone(), data.opcode_vocab, init_rng.gen())?;
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);

    let total_steps = (cfg.epochs * train.len() as f64).ceil() as usize;
    let n_epochs = cfg.epochs.ceil() as usize;
    info!(
        "fold {fold_index}: {} train / {} val graphs, {total_steps} steps, {} parameters",
        train.len(),
        val.len(),
        model.parameter_count()
    );
    let meta = |epoch: usize, val_tau: Option<f64>| CheckpointMeta {
        collection: data.kind.to_string(),
        fold: fold_index,
        epoch,
        seed: cfg.seed,
        val_tau,
        train_graphs: fold.train.clone(),
        val_graphs: fold.val.clone(),
    };
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut lr = 0.0;
    for epoch in 1..=n_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for gi in order {
            if step == total_steps {
                break;
            }
            step += 1;
            let file = train[gi];
            let id = file.graph.graph_id.as_str();
            let fail = non_finite(fold_index, step, id);
            let idx = sample_configs(file.configs.len(), cfg.configs_per_batch, &mut sample_rng);
            let runtimes: Vec<f64> = idx
                .iter()
                .map(|&i| file.configs.runtimes_ns[i] as f64)
                .collect();
            let batch = ConfigBatch::from_set(&file.graph, &file.configs, &idx, &scaler)?;

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let scores = match model.forward(&mut tape, &bound, &train_inputs[gi], &batch) {
                Err(ModelError::Autodiff(e @ AutodiffError::NonFinite { .. })) => {
                    return Err(fail(e.to_string()))
                }
                other => other?,
            };
            let (loss, pairs) = hinge_loss_on_tape(&mut tape, scores, &runtimes)
                .map_err(|e| fail(e.to_string()))?;
            let loss_value = tape.value(loss).item().unwrap_or(f64::NAN);
            if !loss_value.is_finite() {
                return Err(fail(format!("loss is {loss_value}")));
            }
            lr = lr_at(step, total_steps, cfg);
            let mut grad_norm = 0.0;
            if pairs > 0 {
                let mut grads = tape.backward(loss).map_err(|e| fail(e.to_string()))?;
                let mut g: Vec<Tensor> = bound
                    .vars()
                    .iter()
                    .map(|&v| grads.take(v).expect("parameter gradient"))
                    .collect();
                grad_norm = clip_grad_norm(&mut g, cfg.grad_clip_norm);
                if !grad_norm.is_finite() {
                    return Err(fail(format!("gradient norm is {grad_norm}")));
                }
                opt.step(model.params_mut(), &g, lr);
            }
            loss_sum += loss_value;
            loss_count += 1;
            if let Some(w) = log.as_deref_mut() {
                let line = json!({
                    "kind": "step", "fold": fold_index, "epoch": epoch, "step": step,
                    "graph_id": id, "lr": lr, "loss": loss_value, "pairs": pairs,
                    "grad_norm": grad_norm,
                });
                writeln!(w, "{line}").map_err(TrainingError::io(Path::new("<log>")))?;
            }
        }
        let last = epoch == n_epochs;
        let val_tau = if last || epoch % cfg.val_every == 0 {
            mean_tau(&model, &val_inputs, &scaler, cfg.val_batch)?
        } else {
            None
        };
        if let Some(t) = val_tau {
            if t > best.0 {
                best = (t, epoch, model.clone());
            }
        }
        let record = EpochRecord {
            epoch,
            step,
            lr,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            val_tau,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = json!({
                "kind": "epoch", "fold": fold_index, "epoch": epoch, "step": step,
                "lr": lr, "loss": record.mean_loss, "val_tau": val_tau,
            });
            writeln!(w, "{line}").map_err(TrainingError::io(Path::new("<log>")))?;
        }
        log::debug!(
            "fold {fold_index} epoch {epoch}: loss {:.4} val tau {val_tau:?}",
            record.mean_loss
        );
        history.push(record);
    }
    let (best_tau, best_epoch, best_model) = if best.0.is_finite() {
        best
    } else {
        (f64::NAN, n_epochs, model)
    };
    info!("fold {fold_index}: best validation tau {best_tau:.4} at epoch {best_epoch}");
    Ok(FoldResult {
        fold: fold_index,
        best_val_tau: best_tau,
        best_epoch,
        history,
        checkpoint: Checkpoint {
            model: best_model,
            scaler,
            meta: meta(best_epoch, best_tau.is_finite().then_some(best_tau)),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_val_tau: Option<f64>,
    pub best_epoch: usize,
    pub val_graphs: Vec<String>,
    pub checkpoint: String,
}

/// Outcome of a cross-validation run, stored as `cv.json` next to the
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub collection: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: Vec<FoldSummary>,
    /// Folds used for ensembling, best first.
    pub kept: Vec<usize>,
    pub mean_val_tau: f64,
}

pub fn checkpoint_name(fold: usize) -> String {
    format!("fold{fold}.ckpt")
}

pub fn log_name(fold: usize) -> String {
    format!("fold{fold}.log.jsonl")
}

fn run_fold_to_dir(
    data: &TrainData,
    fold: &Fold,
    index: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<FoldResult, TrainingError> {
    let log_path = out.join(log_name(index));
    let file = fs::File::create(&log_path).map_err(TrainingError::io(&log_path))?;
    let mut writer = BufWriter::new(file);
    let result = train_fold(data, fold, index, model_cfg, cfg, Some(&mut writer))?;
    writer.flush().map_err(TrainingError::io(&log_path))?;
    save_checkpoint(&result.checkpoint, &out.join(checkpoint_name(index)))?;
    Ok(result)
}

/// Trains the first `folds_trained` folds of a `k_folds` split, writes one
/// checkpoint and one log per fold into `out`, and keeps the best
/// `folds_kept` folds for ensembling.
pub fn train_cv(
    data: &TrainData,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
    parallel: bool,
) -> Result<CvSummary, TrainingError> {
    let folds: Vec<usize> = (0..cfg.folds_trained).collect();
    train_folds(data, model_cfg, cfg, out, &folds, parallel)
}

/// Like [`train_cv`], for an explicit list of fold indices. At most
/// `folds_kept` of them are kept.
pub fn train_folds(
    data: &TrainData,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
    indices: &[usize],
    parallel: bool,
) -> Result<CvSummary, TrainingError> {
    cfg.validate()?;
    let plan = make_folds(&data.graph_ids(), cfg.k_folds, cfg.seed)?;
    if indices.is_empty() || indices.iter().any(|&i| i >= cfg.k_folds) {
        return Err(TrainingError::Config(format!(
            "fold indices {indices:?} must be non-empty and below k_folds {}",
            cfg.k_folds
        )));
    }
    fs::create_dir_all(out).map_err(TrainingError::io(out))?;
    let results: Vec<FoldResult> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .iter()
                .map(|&i| {
                    let f = &plan.folds[i];
                    s.spawn(move || run_fold_to_dir(data, f, i, model_cfg, cfg, out))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect::<Result<_, _>>()
        })?
    } else {
        indices
            .iter()
            .map(|&i| run_fold_to_dir(data, &plan.folds[i], i, model_cfg, cfg, out))
            .collect::<Result<_, _>>()?
    };
    let taus: Vec<f64> = results
        .iter()
        .map(|r| {
            if r.best_val_tau.is_finite() {
                r.best_val_tau
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let kept: Vec<usize> = select_folds(&taus, cfg.folds_kept.min(taus.len()))?
        .into_iter()
        .map(|i| results[i].fold)
        .collect();
    let finite: Vec<f64> = taus.iter().copied().filter(|t| t.is_finite()).collect();
    let summary = CvSummary {
        collection: data.kind.to_string(),
        model: model_cfg.clone(),
        train: cfg.clone(),
        folds: results
            .iter()
            .map(|r| FoldSummary {
                fold: r.fold,
                best_val_tau: r.best_val_tau.is_finite().then_some(r.best_val_tau),
                best_epoch: r.best_epoch,
                val_graphs: r.checkpoint.meta.val_graphs.clone(),
                checkpoint: checkpoint_name(r.fold),
            })
            .collect(),
        kept,
        mean_val_tau: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
    };
    let path = out.join(CV_SUMMARY_FILE);
    let mut bytes = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(TrainingError::io(&path))?;
    info!(
        "mean validation tau {:.4}; kept folds {:?}",
        summary.mean_val_tau, summary.kept
    );
    Ok(summary)
}

pub fn load_cv_summary(dir: &Path) -> Result<CvSummary, TrainingError> {
    let path = dir.join(CV_SUMMARY_FILE);
    let bytes = fs::read(&path).map_err(TrainingError::io(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        TrainingError::Dataset(DatasetError::Schema {
            path,
            field: String::new(),
            msg: e.to_string(),
        })
    })
}
