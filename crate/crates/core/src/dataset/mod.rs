//! Computational graphs, their configuration sets, and measured runtimes.
//!
//! One JSON document per graph lives under
//! `<root>/<collection>/<split>/<graph_id>.json`, next to a `<root>/manifest.json`
//! describing the collection.

mod io;
mod synthetic;

pub use io::{
    list_graph_files, load_dataset, load_graph, load_manifest, save_graph, save_manifest, Dataset,
    GraphFile, Manifest, PreprocessInfo, MANIFEST_FILE,
};
pub use synthetic::{
    generate_synthetic, layout_code, synthesize, SamplingStyle, SyntheticDataset, SyntheticOracle,
    SyntheticParams, CONFIGURABLE_OPCODES, ORACLE_FILE,
};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{compress_layout, decompress_layout, CompressedLayout};

pub const NODE_FEAT_DIM: usize = 140;
/// Leading `node_feat` entries that are numeric / one-hot.
pub const NUMERIC_FEAT_DIM: usize = 134;
/// Trailing `node_feat` entries holding the output layout permutation.
pub const LAYOUT_SLOTS: usize = 6;
pub const CONFIG_FEAT_DIM: usize = 24;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error in {path} at `{field}`: {msg}")]
    Schema {
        path: PathBuf,
        field: String,
        msg: String,
    },
    #[error("validation error in graph `{graph_id}`: {invariant}")]
    Validation { graph_id: String, invariant: String },
}

impl DatasetError {
    fn invalid(graph_id: &str, invariant: impl Into<String>) -> Self {
        DatasetError::Validation {
            graph_id: graph_id.to_string(),
            invariant: invariant.into(),
        }
    }
}

/// An HLO-style operator graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    pub graph_id: String,
    pub opcodes: Vec<u32>,
    /// One `NODE_FEAT_DIM` row per node.
    pub node_features: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub configurable_nodes: Vec<usize>,
    /// Rank of each node's output tensor; marks which layout slots are padding.
    pub layout_ranks: Vec<usize>,
}

impl ComputationGraph {
    pub fn n_nodes(&self) -> usize {
        self.opcodes.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let id = self.graph_id.as_str();
        let n = self.n_nodes();
        if self.node_features.len() != n {
            return Err(DatasetError::invalid(
                id,
                format!(
                    "{} node_feat rows for {n} opcodes",
                    self.node_features.len()
                ),
            ));
        }
        if self.layout_ranks.len() != n {
            return Err(DatasetError::invalid(
                id,
                format!("{} layout ranks for {n} nodes", self.layout_ranks.len()),
            ));
        }
        if let Some(r) = self.layout_ranks.iter().find(|&&r| r > LAYOUT_SLOTS) {
            return Err(DatasetError::invalid(
                id,
                format!("layout rank {r} exceeds {LAYOUT_SLOTS}"),
            ));
        }
        for (i, row) in self.node_features.iter().enumerate() {
            if row.len() != NODE_FEAT_DIM {
                return Err(DatasetError::invalid(
                    id,
                    format!(
                        "node {i} has {} features, expected {NODE_FEAT_DIM}",
                        row.len()
                    ),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::invalid(
                    id,
                    format!("node {i} has a non-finite feature"),
                ));
            }
            for &slot in &row[NUMERIC_FEAT_DIM..] {
                if slot.fract() != 0.0 || !(-1.0..=5.0).contains(&slot) {
                    return Err(DatasetError::invalid(
                        id,
                        format!("node {i} layout slot {slot} outside {{-1..5}}"),
                    ));
                }
            }
        }
        for &(s, d) in &self.edges {
            if s >= n || d >= n {
                return Err(DatasetError::invalid(
                    id,
                    format!("edge endpoint out of range: ({s}, {d}) with {n} nodes"),
                ));
            }
        }
        if self.configurable_nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DatasetError::invalid(
                id,
                "configurable_nodes not strictly increasing",
            ));
        }
        if let Some(c) = self.configurable_nodes.iter().find(|&&c| c >= n) {
            return Err(DatasetError::invalid(
                id,
                format!("configurable node {c} out of range"),
            ));
        }
        Ok(())
    }

    /// The six output-layout slots of node `i`, as stored.
    pub fn layout_slots(&self, i: usize) -> [i8; LAYOUT_SLOTS] {
        let mut out = [0i8; LAYOUT_SLOTS];
        for (o, v) in out
            .iter_mut()
            .zip(&self.node_features[i][NUMERIC_FEAT_DIM..])
        {
            *o = *v as i8;
        }
        out
    }
}

/// Layout choice for one configurable node: output, input and kernel axis
/// orders, each `-1`-padded to six entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayoutConfig {
    pub output: [i8; LAYOUT_SLOTS],
    pub input: [i8; LAYOUT_SLOTS],
    pub kernel: [i8; LAYOUT_SLOTS],
}

impl LayoutConfig {
    pub const PADDING: LayoutConfig = LayoutConfig {
        output: [-1; LAYOUT_SLOTS],
        input: [-1; LAYOUT_SLOTS],
        kernel: [-1; LAYOUT_SLOTS],
    };

    pub fn from_slots(slots: &[i8]) -> Option<Self> {
        if slots.len() != 3 * LAYOUT_SLOTS {
            return None;
        }
        let mut c = Self::PADDING;
        c.output.copy_from_slice(&slots[..6]);
        c.input.copy_from_slice(&slots[6..12]);
        c.kernel.copy_from_slice(&slots[12..]);
        Some(c)
    }

    /// Output, input, kernel slots back to back.
    pub fn slots(&self) -> [i8; 3 * LAYOUT_SLOTS] {
        let mut s = [0i8; 18];
        s[..6].copy_from_slice(&self.output);
        s[6..12].copy_from_slice(&self.input);
        s[12..].copy_from_slice(&self.kernel);
        s
    }

    pub fn is_valid(&self) -> bool {
        [self.output, self.input, self.kernel]
            .iter()
            .all(valid_layout_vec)
    }
}

/// Entries in `{-1..5}` with all `-1` entries forming a suffix.
pub fn valid_layout_vec(v: &[i8; LAYOUT_SLOTS]) -> bool {
    if v.iter().any(|&x| !(-1..=5).contains(&x)) {
        return false;
    }
    let first_pad = v.iter().position(|&x| x == -1).unwrap_or(LAYOUT_SLOTS);
    v[first_pad..].iter().all(|&x| x == -1)
}

/// Per-configuration payload in one of its storage forms.
#[derive(Debug, Clone, PartialEq)]
pub enum Configs {
    /// Per configuration, one [`LayoutConfig`] per configurable node.
    Layout(Vec<Vec<LayoutConfig>>),
    /// Same content, base-7 compressed.
    Compressed(Vec<Vec<CompressedLayout>>),
    /// Tile collections: one global feature vector per configuration.
    Tile(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigurationSet {
    pub configs: Configs,
    pub runtimes_ns: Vec<u64>,
}

impl ConfigurationSet {
    pub fn len(&self) -> usize {
        self.runtimes_ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runtimes_ns.is_empty()
    }

    fn payload_len(&self) -> usize {
        match &self.configs {
            Configs::Layout(c) => c.len(),
            Configs::Compressed(c) => c.len(),
            Configs::Tile(c) => c.len(),
        }
    }

    pub fn is_tile(&self) -> bool {
        matches!(self.configs, Configs::Tile(_))
    }

    /// Layout of configuration `index`, decompressing when needed. `None` for
    /// tile sets.
    pub fn layout(&self, index: usize) -> Option<Vec<LayoutConfig>> {
        match &self.configs {
            Configs::Layout(c) => Some(c[index].clone()),
            Configs::Compressed(c) => Some(
                c[index]
                    .iter()
                    .map(|code| code.decompress().expect("validated code"))
                    .collect(),
            ),
            Configs::Tile(_) => None,
        }
    }

    pub fn tile_features(&self, index: usize) -> Option<&[f64]> {
        match &self.configs {
            Configs::Tile(c) => Some(&c[index]),
            _ => None,
        }
    }

    /// Converts raw layouts to the compressed form; other forms are returned as is.
    pub fn compressed(&self) -> ConfigurationSet {
        let configs = match &self.configs {
            Configs::Layout(c) => Configs::Compressed(
                c.iter()
                    .map(|cfg| cfg.iter().map(CompressedLayout::compress).collect())
                    .collect(),
            ),
            other => other.clone(),
        };
        ConfigurationSet {
            configs,
            runtimes_ns: self.runtimes_ns.clone(),
        }
    }

    pub fn validate(&self, graph_id: &str, n_configurable: usize) -> Result<(), DatasetError> {
        if self.payload_len() != self.runtimes_ns.len() {
            return Err(DatasetError::invalid(
                graph_id,
                format!(
                    "{} configurations but {} runtimes",
                    self.payload_len(),
                    self.runtimes_ns.len()
                ),
            ));
        }
        if self.is_empty() {
            return Err(DatasetError::invalid(
                graph_id,
                "configuration set is empty",
            ));
        }
        match &self.configs {
            Configs::Layout(c) => {
                for (i, cfg) in c.iter().enumerate() {
                    if cfg.len() != n_configurable {
                        return Err(DatasetError::invalid(
                            graph_id,
                            format!(
                                "config {i} covers {} nodes, expected {n_configurable}",
                                cfg.len()
                            ),
                        ));
                    }
                    if !cfg.iter().all(LayoutConfig::is_valid) {
                        return Err(DatasetError::invalid(
                            graph_id,
                            format!(
                                "config {i} has a layout outside {{-1..5}} or non-suffix padding"
                            ),
                        ));
                    }
                }
            }
            Configs::Compressed(c) => {
                for (i, cfg) in c.iter().enumerate() {
                    if cfg.len() != n_configurable {
                        return Err(DatasetError::invalid(
                            graph_id,
                            format!(
                                "config {i} covers {} nodes, expected {n_configurable}",
                                cfg.len()
                            ),
                        ));
                    }
                    for code in cfg {
                        match code.decompress() {
                            Some(l) if l.is_valid() => {}
                            _ => {
                                return Err(DatasetError::invalid(
                                    graph_id,
                                    format!(
                                        "config {i} has an invalid compressed layout {:?}",
                                        code.0
                                    ),
                                ))
                            }
                        }
                    }
                }
            }
            Configs::Tile(c) => {
                for (i, f) in c.iter().enumerate() {
                    if f.len() != CONFIG_FEAT_DIM || f.iter().any(|v| !v.is_finite()) {
                        return Err(DatasetError::invalid(
                            graph_id,
                            format!("config {i} needs {CONFIG_FEAT_DIM} finite config_feat values"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

impl CompressedLayout {
    pub fn compress(layout: &LayoutConfig) -> Self {
        let c = |v: &[i8; LAYOUT_SLOTS]| compress_layout(v).expect("validated layout");
        CompressedLayout([c(&layout.output), c(&layout.input), c(&layout.kernel)])
    }

    pub fn decompress(&self) -> Option<LayoutConfig> {
        Some(LayoutConfig {
            output: decompress_layout(self.0[0]).ok()?,
            input: decompress_layout(self.0[1]).ok()?,
            kernel: decompress_layout(self.0[2]).ok()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollectionMode {
    LayoutRandom,
    LayoutDefault,
    Tile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceGroup {
    Xla,
    Nlp,
}

/// Which collection a graph belongs to, e.g. `layout:xla:random` or `tile:xla`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CollectionKind {
    pub mode: CollectionMode,
    pub source: SourceGroup,
}

impl CollectionKind {
    pub fn is_tile(&self) -> bool {
        self.mode == CollectionMode::Tile
    }

    /// Directory-safe name, e.g. `layout-xla-random`.
    pub fn dir_name(&self) -> String {
        self.to_string().replace(':', "-")
    }

    /// Configurations sampled per training step for this collection.
    pub fn default_batch(&self) -> usize {
        match self.mode {
            CollectionMode::LayoutDefault => 64,
            CollectionMode::LayoutRandom | CollectionMode::Tile => 128,
        }
    }
}

impl fmt::Display for CollectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let source = match self.source {
            SourceGroup::Xla => "xla",
            SourceGroup::Nlp => "nlp",
        };
        match self.mode {
            CollectionMode::LayoutRandom => write!(f, "layout:{source}:random"),
            CollectionMode::LayoutDefault => write!(f, "layout:{source}:default"),
            CollectionMode::Tile => write!(f, "tile:{source}"),
        }
    }
}

impl FromStr for CollectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split([':', '-']).collect();
        let source = |p: &str| match p {
            "xla" => Ok(SourceGroup::Xla),
            "nlp" => Ok(SourceGroup::Nlp),
            other => Err(format!("unknown source group `{other}`")),
        };
        match parts.as_slice() {
            ["layout", src, "random"] => Ok(Self {
                mode: CollectionMode::LayoutRandom,
                source: source(src)?,
            }),
            ["layout", src, "default"] => Ok(Self {
                mode: CollectionMode::LayoutDefault,
                source: source(src)?,
            }),
            ["tile", src] => Ok(Self {
                mode: CollectionMode::Tile,
                source: source(src)?,
            }),
            _ => Err(format!("unknown collection kind `{s}`")),
        }
    }
}

impl Serialize for CollectionKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CollectionKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trips_through_strings() {
        for s in ["layout:xla:random", "layout:nlp:default", "tile:xla"] {
            let k: CollectionKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
            assert_eq!(k.dir_name().parse::<CollectionKind>().unwrap(), k);
        }
        assert!("layout:xla".parse::<CollectionKind>().is_err());
    }

    #[test]
    fn layout_vec_padding_must_be_suffix() {
        assert!(valid_layout_vec(&[2, 1, 0, -1, -1, -1]));
        assert!(valid_layout_vec(&[-1; 6]));
        assert!(!valid_layout_vec(&[2, -1, 0, -1, -1, -1]));
        assert!(!valid_layout_vec(&[6, 1, 0, -1, -1, -1]));
    }

    #[test]
    fn default_batch_by_sampling_strategy() {
        let d: CollectionKind = "layout:xla:default".parse().unwrap();
        let r: CollectionKind = "layout:nlp:random".parse().unwrap();
        assert_eq!(d.default_batch(), 64);
        assert_eq!(r.default_batch(), 128);
    }
}
