use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    CollectionKind, ComputationGraph, Configs, ConfigurationSet, DatasetError, LayoutConfig,
    NODE_FEAT_DIM,
};
use crate::preprocess::{CompressedLayout, FeatureScaler};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A graph document as stored on disk. Fields are declared in sorted order
/// so serialized keys come out sorted.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_feat: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    configs: Option<Vec<Vec<Vec<i8>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    configs_compressed: Option<Vec<Vec<CompressedLayout>>>,
    configurable_nodes: Vec<usize>,
    edges: Vec<[usize; 2]>,
    graph_id: String,
    kind: CollectionKind,
    layout_ranks: Vec<usize>,
    node_feat: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_origin: Option<Vec<usize>>,
    opcodes: Vec<u32>,
    runtimes_ns: Vec<u64>,
}

/// Everything stored in one graph document.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFile {
    pub graph: ComputationGraph,
    pub configs: ConfigurationSet,
    pub kind: CollectionKind,
    /// Present after pruning: original index of each retained node.
    pub node_origin: Option<Vec<usize>>,
}

impl GraphFile {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let id = &self.graph.graph_id;
        self.graph.validate()?;
        self.configs
            .validate(id, self.graph.configurable_nodes.len())?;
        if self.kind.is_tile() != self.configs.is_tile() {
            return Err(DatasetError::invalid(
                id,
                format!(
                    "collection kind {} does not match the configuration payload",
                    self.kind
                ),
            ));
        }
        if let Some(origin) = &self.node_origin {
            if origin.len() != self.graph.n_nodes() {
                return Err(DatasetError::invalid(
                    id,
                    "node_origin length differs from node count",
                ));
            }
        }
        Ok(())
    }

    fn to_record(&self) -> GraphRecord {
        let g = &self.graph;
        let (mut configs, mut configs_compressed, mut config_feat) = (None, None, None);
        match &self.configs.configs {
            Configs::Layout(c) => {
                configs = Some(
                    c.iter()
                        .map(|cfg| cfg.iter().map(|l| l.slots().to_vec()).collect())
                        .collect(),
                )
            }
            Configs::Compressed(c) => configs_compressed = Some(c.clone()),
            Configs::Tile(c) => config_feat = Some(c.clone()),
        }
        GraphRecord {
            config_feat,
            configs,
            configs_compressed,
            configurable_nodes: g.configurable_nodes.clone(),
            edges: g.edges.iter().map(|&(s, d)| [s, d]).collect(),
            graph_id: g.graph_id.clone(),
            kind: self.kind,
            layout_ranks: g.layout_ranks.clone(),
            node_feat: g.node_features.clone(),
            node_origin: self.node_origin.clone(),
            opcodes: g.opcodes.clone(),
            runtimes_ns: self.configs.runtimes_ns.clone(),
        }
    }

    fn from_record(r: GraphRecord, path: &Path) -> Result<Self, DatasetError> {
        let schema = |field: &str, msg: &str| DatasetError::Schema {
            path: path.to_path_buf(),
            field: field.to_string(),
            msg: msg.to_string(),
        };
        let payloads = [
            r.configs.is_some(),
            r.configs_compressed.is_some(),
            r.config_feat.is_some(),
        ];
        if payloads.iter().filter(|p| **p).count() != 1 {
            return Err(schema(
                "configs",
                "exactly one of `configs`, `configs_compressed`, `config_feat` is required",
            ));
        }
        let configs = if let Some(raw) = r.configs {
            let mut out = Vec::with_capacity(raw.len());
            for (i, cfg) in raw.into_iter().enumerate() {
                let mut nodes = Vec::with_capacity(cfg.len());
                for (j, slots) in cfg.into_iter().enumerate() {
                    nodes.push(LayoutConfig::from_slots(&slots).ok_or_else(|| {
                        schema(&format!("configs[{i}][{j}]"), "expected 18 layout slots")
                    })?);
                }
                out.push(nodes);
            }
            Configs::Layout(out)
        } else if let Some(c) = r.configs_compressed {
            Configs::Compressed(c)
        } else {
            Configs::Tile(r.config_feat.unwrap())
        };
        let file = GraphFile {
            graph: ComputationGraph {
                graph_id: r.graph_id,
                opcodes: r.opcodes,
                node_features: r.node_feat,
                edges: r.edges.into_iter().map(|[s, d]| (s, d)).collect(),
                configurable_nodes: r.configurable_nodes,
                layout_ranks: r.layout_ranks,
            },
            configs: ConfigurationSet {
                configs,
                runtimes_ns: r.runtimes_ns,
            },
            kind: r.kind,
            node_origin: r.node_origin,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let record: GraphRecord = parse_json(&bytes, path)?;
        Self::from_record(record, path)
    }

    /// Writes compact JSON with sorted keys; identical inputs give identical bytes.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        let mut bytes = serde_json::to_vec(&self.to_record()).expect("graph record serializes");
        bytes.push(b'\n');
        write_bytes(path, &bytes)
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<T, DatasetError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(&mut de).map_err(|e| DatasetError::Schema {
        path: path.to_path_buf(),
        field: e.path().to_string(),
        msg: e.inner().to_string(),
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

pub fn load_graph(path: &Path) -> Result<GraphFile, DatasetError> {
    GraphFile::load(path)
}

pub fn save_graph(
    graph: &ComputationGraph,
    configs: &ConfigurationSet,
    kind: CollectionKind,
    path: &Path,
) -> Result<(), DatasetError> {
    GraphFile {
        graph: graph.clone(),
        configs: configs.clone(),
        kind,
        node_origin: None,
    }
    .save(path)
}

/// Which preprocessing steps produced a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessInfo {
    pub compressed: bool,
    pub deduplicated: bool,
    pub pruned: bool,
    pub repadded: bool,
    /// Graphs left without configurable nodes after pruning.
    #[serde(default)]
    pub skipped_graphs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Directory name of the collection under the dataset root.
    pub collection: String,
    /// `node:3x6` for layout collections, `graph:24` for tile.
    pub config_feat_layout: String,
    pub feature_dim: usize,
    pub kind: CollectionKind,
    pub opcode_vocab: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<FeatureScaler>,
    pub splits: Vec<String>,
}

impl Manifest {
    pub fn new(kind: CollectionKind, opcode_vocab: usize, splits: Vec<String>) -> Self {
        Self {
            collection: kind.dir_name(),
            config_feat_layout: if kind.is_tile() {
                "graph:24"
            } else {
                "node:3x6"
            }
            .to_string(),
            feature_dim: NODE_FEAT_DIM,
            kind,
            opcode_vocab,
            preprocess: None,
            scaler: None,
            splits,
        }
    }

    pub fn split_dir(&self, root: &Path, split: &str) -> PathBuf {
        root.join(&self.collection).join(split)
    }
}

pub fn load_manifest(root: &Path) -> Result<Manifest, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    let m: Manifest = parse_json(&bytes, &path)?;
    if m.feature_dim != NODE_FEAT_DIM {
        return Err(DatasetError::Schema {
            path,
            field: "feature_dim".into(),
            msg: format!("expected {NODE_FEAT_DIM}, found {}", m.feature_dim),
        });
    }
    Ok(m)
}

pub fn save_manifest(root: &Path, manifest: &Manifest) -> Result<(), DatasetError> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_bytes(&root.join(MANIFEST_FILE), &bytes)
}

/// Graph documents of one split, sorted by file name.
pub fn list_graph_files(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let entries = fs::read_dir(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "json") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// One split of a collection, fully loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub split: String,
    pub graphs: Vec<GraphFile>,
}

impl Dataset {
    pub fn graph(&self, graph_id: &str) -> Option<&GraphFile> {
        self.graphs.iter().find(|g| g.graph.graph_id == graph_id)
    }

    pub fn graph_ids(&self) -> Vec<String> {
        self.graphs
            .iter()
            .map(|g| g.graph.graph_id.clone())
            .collect()
    }
}

pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset, DatasetError> {
    let manifest = load_manifest(root)?;
    let dir = manifest.split_dir(root, split);
    let mut graphs = Vec::new();
    for path in list_graph_files(&dir)? {
        let g = GraphFile::load(&path)?;
        if g.kind != manifest.kind {
            return Err(DatasetError::invalid(
                &g.graph.graph_id,
                format!(
                    "kind {} differs from manifest kind {}",
                    g.kind, manifest.kind
                ),
            ));
        }
        if let Some(op) = g
            .graph
            .opcodes
            .iter()
            .find(|&&o| o as usize >= manifest.opcode_vocab)
        {
            return Err(DatasetError::invalid(
                &g.graph.graph_id,
                format!(
                    "opcode {op} outside vocabulary of {}",
                    manifest.opcode_vocab
                ),
            ));
        }
        graphs.push(g);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        split: split.to_string(),
        graphs,
    })
}
