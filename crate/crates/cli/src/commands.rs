use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use tgraph::autodiff::op_suite;
use tgraph::dataset::{
    generate_synthetic, load_dataset, load_manifest, CollectionKind, GraphFile, SamplingStyle,
    SyntheticParams,
};
use tgraph::inference::{rank, RankOptions, RankingResult, DEFAULT_BATCH, DEFAULT_TTA};
use tgraph::model::{block_gradcheck, load_checkpoint, Checkpoint};
use tgraph::preprocess::{preprocess_dataset, preprocess_graph, PreprocessOptions};
use tgraph::ranking::{kendall_tau, tile_metric};
use tgraph::training::{
    checkpoint_name, load_cv_summary, train_cv, train_folds, CvSummary, TrainData, CV_SUMMARY_FILE,
};

use crate::config::TrainArgs;
use crate::error::CliError;

/// Number of top predictions the tile metric looks at.
pub const TILE_TOP_K: usize = 5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const ABLATION_FILE: &str = "ablation.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("value serializes")
    );
}

// synth

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StyleArg {
    Random,
    Default,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Seed for the hidden runtime tables, graphs and configurations
    #[arg(long)]
    pub seed: u64,
    /// Number of graphs
    #[arg(long)]
    pub graphs: usize,
    /// Node count range, e.g. 8..40 (inclusive)
    #[arg(long, value_parser = parse_range)]
    pub nodes: (usize, usize),
    /// Configurations per graph
    #[arg(long)]
    pub configs: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// How layout configurations are sampled
    #[arg(long, value_enum, default_value = "random")]
    pub style: StyleArg,
    /// Emit a tile collection instead of a layout one
    #[arg(long)]
    pub tile: bool,
    /// Upper bound of the hidden edge interaction costs, in nanoseconds [default: 600]
    #[arg(long)]
    pub edge_scale: Option<u64>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected MIN..MAX, got `{s}`"))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad bound `{t}`: {e}"))
    };
    Ok((parse(a)?, parse(b)?))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut p = SyntheticParams::new(a.seed, a.graphs, a.nodes, a.configs);
    p.style = match a.style {
        StyleArg::Random => SamplingStyle::Random,
        StyleArg::Default => SamplingStyle::Default,
    };
    p.tile = a.tile;
    if let Some(s) = a.edge_scale {
        p.edge_scale = s;
    }
    let data = generate_synthetic(&p, &a.out)?;
    info!(
        "wrote {} graphs of {} to {}",
        data.graphs.len(),
        data.manifest.kind,
        a.out.display()
    );
    Ok(())
}

// preprocess

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep nodes that do not touch a configurable node
    #[arg(long)]
    pub no_prune: bool,
    /// Keep duplicate configurations
    #[arg(long)]
    pub no_dedup: bool,
}

pub fn preprocess(a: &PreprocessArgs) -> Result<(), CliError> {
    let info = preprocess_dataset(
        &a.input,
        &a.out,
        PreprocessOptions {
            prune: !a.no_prune,
            dedup: !a.no_dedup,
        },
    )?;
    if !info.skipped_graphs.is_empty() {
        warn!("skipped graphs: {:?}", info.skipped_graphs);
    }
    print_json(&info);
    Ok(())
}

// train

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Train only this fold instead of the cross-validation run
    #[arg(long)]
    pub fold: Option<usize>,
}

fn load_train_data(a: &TrainArgs) -> Result<TrainData, CliError> {
    let data = TrainData::load(&a.data)?;
    if let Some(name) = &a.collection {
        let wanted: CollectionKind = name.parse().map_err(CliError::Validation)?;
        if wanted != data.kind {
            return Err(CliError::Validation(format!(
                "--collection {wanted} does not match dataset collection {}",
                data.kind
            )));
        }
    }
    info!("{} training graphs of {}", data.graphs.len(), data.kind);
    Ok(data)
}

pub fn train(a: &TrainCmd) -> Result<CvSummary, CliError> {
    let data = load_train_data(&a.common)?;
    let r = a.common.resolve(data.kind)?;
    let summary = match a.fold {
        Some(i) => train_folds(&data, &r.model, &r.train, &a.common.out, &[i], false)?,
        None => train_cv(
            &data,
            &r.model,
            &r.train,
            &a.common.out,
            a.common.parallel_folds,
        )?,
    };
    print_json(&summary);
    Ok(summary)
}

// rank

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory with fold checkpoints (and the run summary)
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Test-time augmentation rounds
    #[arg(long, default_value_t = DEFAULT_TTA)]
    pub tta: usize,
    /// Inference batch size
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub batch: usize,
    /// Seed of the augmentation permutations
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split to rank; every split in the manifest when omitted
    #[arg(long)]
    pub split: Option<String>,
}

/// Checkpoints of the kept folds when a run summary exists, otherwise every
/// `*.ckpt` file in the directory.
pub fn load_checkpoints(dir: &Path) -> Result<Vec<Checkpoint>, CliError> {
    let paths: Vec<PathBuf> = if dir.join(CV_SUMMARY_FILE).exists() {
        let summary = load_cv_summary(dir)?;
        summary
            .kept
            .iter()
            .map(|&f| dir.join(checkpoint_name(f)))
            .collect()
    } else {
        let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        let mut v = Vec::new();
        for entry in entries {
            let p = entry.map_err(|e| CliError::io(dir, e))?.path();
            if p.extension().is_some_and(|e| e == "ckpt") {
                v.push(p);
            }
        }
        v.sort();
        v
    };
    if paths.is_empty() {
        return Err(CliError::Validation(format!(
            "no checkpoint found in {}",
            dir.display()
        )));
    }
    Ok(paths
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<_, _>>()?)
}

fn splits(root: &Path, split: Option<&str>) -> Result<Vec<String>, CliError> {
    let manifest = load_manifest(root)?;
    match split {
        Some(s) if manifest.splits.iter().any(|m| m == s) => Ok(vec![s.to_string()]),
        Some(s) => Err(CliError::Validation(format!(
            "split `{s}` not in manifest {:?}",
            manifest.splits
        ))),
        None => Ok(manifest.splits),
    }
}

/// Graphs ready for scoring. Raw graphs are pruned but not deduplicated, so
/// configuration indices still refer to the files on disk.
fn ranking_graphs(root: &Path, split: Option<&str>) -> Result<Vec<GraphFile>, CliError> {
    let raw = load_manifest(root)?.preprocess.is_none();
    let opts = PreprocessOptions {
        prune: true,
        dedup: false,
    };
    let mut out = Vec::new();
    for s in splits(root, split)? {
        for g in load_dataset(root, &s)?.graphs {
            if !raw {
                out.push(g);
            } else {
                match preprocess_graph(&g, opts) {
                    Some(p) => out.push(p),
                    None => warn!(
                        "graph `{}` has no configurable node; not ranked",
                        g.graph.graph_id
                    ),
                }
            }
        }
    }
    Ok(out)
}

pub type Predictions = BTreeMap<String, RankingResult>;

pub fn rank_cmd(a: &RankArgs) -> Result<Predictions, CliError> {
    let checkpoints = load_checkpoints(&a.ckpt)?;
    let opts = RankOptions {
        n_tta: a.tta,
        batch: a.batch,
        tta_seed: a.seed,
    };
    let mut preds = Predictions::new();
    for g in ranking_graphs(&a.data, a.split.as_deref())? {
        let r = rank(&g, &checkpoints, opts)?;
        preds.insert(r.graph_id.clone(), r);
    }
    info!(
        "ranked {} graphs with {} checkpoints",
        preds.len(),
        checkpoints.len()
    );
    write_json(&a.out, &preds)?;
    Ok(preds)
}

// evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions written by `rank`
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the report to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `kendall_tau` for layout collections, `m_tile` for tile.
    pub metric: String,
    pub per_graph: BTreeMap<String, f64>,
    pub mean: f64,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<Evaluation, CliError> {
    let text = fs::read_to_string(&a.pred).map_err(|e| CliError::io(&a.pred, e))?;
    let preds: Predictions = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.pred.display())))?;
    let manifest = load_manifest(&a.data)?;
    let tile = manifest.kind.is_tile();
    let mut truth = BTreeMap::new();
    for s in &manifest.splits {
        for g in load_dataset(&a.data, s)?.graphs {
            truth.insert(g.graph.graph_id.clone(), g);
        }
    }
    let mut per_graph = BTreeMap::new();
    for (id, p) in &preds {
        let g = truth
            .get(id)
            .ok_or_else(|| CliError::Validation(format!("graph `{id}` not in dataset")))?;
        let r: Vec<f64> = g.configs.runtimes_ns.iter().map(|&v| v as f64).collect();
        let value = if tile {
            tile_metric(&r, &p.scores, TILE_TOP_K)?
        } else {
            kendall_tau(&r, &p.scores)?
        };
        per_graph.insert(id.clone(), value);
    }
    if per_graph.is_empty() {
        return Err(CliError::Validation("no predictions to evaluate".into()));
    }
    let mean = per_graph.values().sum::<f64>() / per_graph.len() as f64;
    let report = Evaluation {
        metric: if tile { "m_tile" } else { "kendall_tau" }.into(),
        per_graph,
        mean,
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report);
    Ok(report)
}

// gradcheck

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct GradcheckLine<'a> {
    name: &'a str,
    checked: usize,
    max_rel_error: f64,
    tolerance: f64,
    pass: bool,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let mut reports: Vec<_> = op_suite(a.seed)?
        .into_iter()
        .map(|r| (r, OP_TOLERANCE))
        .collect();
    reports.push((block_gradcheck(a.seed)?, BLOCK_TOLERANCE));
    let mut failed = Vec::new();
    for (r, tol) in &reports {
        let pass = r.passes(*tol);
        println!(
            "{}",
            serde_json::to_string(&GradcheckLine {
                name: &r.name,
                checked: r.checked,
                max_rel_error: r.max_rel_error,
                tolerance: *tol,
                pass,
            })
            .expect("line serializes")
        );
        if !pass {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradcheck failed for {failed:?}"
        )))
    }
}

// ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSelfAttention,
    NoCrossAttention,
    NoEdges,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSelfAttention => "no-self-attention",
            Variant::NoCrossAttention => "no-cross-attention",
            Variant::NoEdges => "no-edges",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Variants to train, comma separated; the full model alone by default
    #[arg(long, value_enum, value_delimiter = ',', default_value = "full")]
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_val_tau: f64,
    /// Difference to the full model, when it was trained.
    pub delta: Option<f64>,
}

pub fn ablate(a: &AblateArgs) -> Result<Vec<AblationRow>, CliError> {
    let c = &a.common;
    if c.no_self_attention || c.no_cross_attention || c.no_edges {
        return Err(CliError::Validation(
            "ablate selects features through --variants, not --no-* flags".into(),
        ));
    }
    let mut seen = a.variants.clone();
    seen.sort_by_key(|v| *v as u8);
    seen.dedup();
    if seen.len() != a.variants.len() {
        return Err(CliError::Validation("duplicate variant".into()));
    }
    let data = load_train_data(c)?;
    let mut taus = Vec::new();
    for &v in &a.variants {
        let mut args = c.clone();
        args.no_self_attention = v == Variant::NoSelfAttention;
        args.no_cross_attention = v == Variant::NoCrossAttention;
        args.no_edges = v == Variant::NoEdges;
        let r = args.resolve(data.kind)?;
        info!("training variant {}", v.name());
        let summary = train_cv(
            &data,
            &r.model,
            &r.train,
            &c.out.join(v.name()),
            c.parallel_folds,
        )?;
        taus.push((v, summary.mean_val_tau));
    }
    let full = taus
        .iter()
        .find(|(v, _)| *v == Variant::Full)
        .map(|&(_, t)| t);
    let rows: Vec<AblationRow> = taus
        .into_iter()
        .map(|(variant, t)| AblationRow {
            variant,
            mean_val_tau: t,
            delta: full.map(|f| t - f),
        })
        .collect();
    println!("{:<20} {:>10} {:>10}", "variant", "mean_tau", "delta");
    for r in &rows {
        let delta = r.delta.map_or("-".to_string(), |d| format!("{d:+.4}"));
        println!(
            "{:<20} {:>10.4} {:>10}",
            r.variant.name(),
            r.mean_val_tau,
            delta
        );
    }
    write_json(&c.out.join(ABLATION_FILE), &rows)?;
    Ok(rows)
}
