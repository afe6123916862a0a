//! Training settings resolved from defaults, an optional JSON file and flags.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tgraph::dataset::CollectionKind;
use tgraph::model::{ModelConfig, ModelMode};
use tgraph::training::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset root (raw or preprocessed)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, logs and the run summary
    #[arg(long)]
    pub out: PathBuf,
    /// Expected collection, e.g. layout:xla:random; must match the manifest
    #[arg(long)]
    pub collection: Option<String>,
    /// Seed for fold assignment, initialization and sampling
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with optional "model" and "train" sections
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training epochs per fold (may be fractional)
    #[arg(long)]
    pub epochs: Option<f64>,
    /// Configurations sampled per training step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Hidden width of the graph trunk
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of cross-validation folds
    #[arg(long)]
    pub k_folds: Option<usize>,
    /// Folds actually trained
    #[arg(long)]
    pub folds_trained: Option<usize>,
    /// Best folds kept for ensembling
    #[arg(long)]
    pub folds_kept: Option<usize>,
    /// Train the folds on separate threads
    #[arg(long)]
    pub parallel_folds: bool,
    /// Disable channel-wise self-attention
    #[arg(long)]
    pub no_self_attention: bool,
    /// Disable cross-configuration attention
    #[arg(long)]
    pub no_cross_attention: bool,
    /// Ignore graph edges in neighbor aggregation
    #[arg(long)]
    pub no_edges: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: Map<String, Value>,
    #[serde(default)]
    train: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Overlays `patch` on the serialized `base` and parses the result back.
fn overlay<T>(base: &T, patch: Map<String, Value>, section: &str) -> Result<T, CliError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut value = serde_json::to_value(base).expect("config serializes");
    let obj = value.as_object_mut().expect("config is an object");
    for (k, v) in patch {
        obj.insert(k, v);
    }
    serde_json::from_value(value)
        .map_err(|e| CliError::Validation(format!("config file section `{section}`: {e}")))
}

impl TrainArgs {
    /// Defaults for `kind`, then the config file, then flags.
    pub fn resolve(&self, kind: CollectionKind) -> Result<Resolved, CliError> {
        let mut model = ModelConfig {
            mode: if kind.is_tile() {
                ModelMode::Tile
            } else {
                ModelMode::Layout
            },
            ..ModelConfig::default()
        };
        let mut train = TrainConfig::for_collection(kind);
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let file: ConfigFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            model = overlay(&model, file.model, "model")?;
            train = overlay(&train, file.train, "train")?;
            info!("config file {} applied", path.display());
        }
        if let Some(v) = self.seed {
            train.seed = v;
        }
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.batch {
            train.configs_per_batch = v;
        }
        if let Some(v) = self.lr {
            train.lr_peak = v;
        }
        if let Some(v) = self.k_folds {
            train.k_folds = v;
        }
        if let Some(v) = self.folds_trained {
            train.folds_trained = v;
        }
        if let Some(v) = self.folds_kept {
            train.folds_kept = v;
        }
        if let Some(v) = self.hidden {
            model.hidden_dim = v;
        }
        if self.no_self_attention {
            model.use_self_attention = false;
        }
        if self.no_cross_attention {
            model.use_cross_attention = false;
        }
        if self.no_edges {
            model.use_edges = false;
        }
        model.validate()?;
        train.validate()?;
        let resolved = Resolved { model, train };
        info!(
            "effective settings (flags > file > defaults): {}",
            serde_json::to_string(&resolved).expect("settings serialize")
        );
        Ok(resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Harness {
        #[command(flatten)]
        args: TrainArgs,
    }

    fn kind() -> CollectionKind {
        "layout:xla:random".parse().unwrap()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"model": {"hidden_dim": 64}, "train": {"epochs": 9, "lr_peak": 0.002}}"#,
        )
        .unwrap();
        let h = Harness::parse_from([
            "x",
            "--data",
            "d",
            "--out",
            "o",
            "--config",
            path.to_str().unwrap(),
            "--epochs",
            "3",
        ]);
        let r = h.args.resolve(kind()).unwrap();
        assert_eq!(r.train.epochs, 3.0);
        assert_eq!(r.train.lr_peak, 0.002);
        assert_eq!(r.model.hidden_dim, 64);
        assert_eq!(r.train.weight_decay, TrainConfig::default().weight_decay);
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"epoch": 9}}"#).unwrap();
        let h = Harness::parse_from([
            "x",
            "--data",
            "d",
            "--out",
            "o",
            "--config",
            path.to_str().unwrap(),
        ]);
        let err = h.args.resolve(kind()).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)), "{err}");
    }
}
