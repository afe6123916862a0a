//! Seeded synthetic collections with a known runtime function.
//!
//! Runtimes come from hidden lookup tables drawn once from the seed: a cost per
//! (opcode, layout code) for every configurable node, plus an interaction cost
//! for every edge joining two configurable nodes. Adjacent configurable nodes
//! whose minor output axes disagree pay a conversion cost, so graph
//! connectivity matters for ranking.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{save_manifest, write_bytes, GraphFile, Manifest};
use super::{
    CollectionKind, CollectionMode, ComputationGraph, Configs, ConfigurationSet, DatasetError,
    LayoutConfig, SourceGroup, CONFIG_FEAT_DIM, LAYOUT_SLOTS, NODE_FEAT_DIM, NUMERIC_FEAT_DIM,
};

pub const ORACLE_FILE: &str = "oracle.json";
/// Convolution, dot and reshape.
pub const CONFIGURABLE_OPCODES: [u32; 3] = [1, 2, 3];
pub const DEFAULT_OPCODE_VOCAB: usize = 12;

const MAX_RANK: usize = 4;
const LAYOUT_CODES: usize = MAX_RANK * MAX_RANK;
const TILE_BUCKETS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStyle {
    /// Every configurable node draws its layouts independently.
    Random,
    /// Configurations are small mutations of one base configuration.
    Default,
}

#[derive(Debug, Clone)]
pub struct SyntheticParams {
    pub seed: u64,
    pub n_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub configs_per_graph: usize,
    pub style: SamplingStyle,
    pub tile: bool,
    pub opcode_vocab: usize,
    /// Upper bound of the edge interaction table entries, in nanoseconds.
    pub edge_scale: u64,
}

impl SyntheticParams {
    pub fn new(
        seed: u64,
        n_graphs: usize,
        nodes: (usize, usize),
        configs_per_graph: usize,
    ) -> Self {
        Self {
            seed,
            n_graphs,
            min_nodes: nodes.0,
            max_nodes: nodes.1,
            configs_per_graph,
            style: SamplingStyle::Random,
            tile: false,
            opcode_vocab: DEFAULT_OPCODE_VOCAB,
            edge_scale: 600,
        }
    }

    pub fn kind(&self) -> CollectionKind {
        let mode = match (self.tile, self.style) {
            (true, _) => CollectionMode::Tile,
            (false, SamplingStyle::Random) => CollectionMode::LayoutRandom,
            (false, SamplingStyle::Default) => CollectionMode::LayoutDefault,
        };
        CollectionKind {
            mode,
            source: SourceGroup::Xla,
        }
    }

    fn check(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| DatasetError::Validation {
            graph_id: "<synthetic>".into(),
            invariant: msg,
        };
        if self.min_nodes < 4 || self.max_nodes < self.min_nodes {
            return Err(bad(format!(
                "node range {}..{} must satisfy 4 <= min <= max",
                self.min_nodes, self.max_nodes
            )));
        }
        if self.configs_per_graph < 2 {
            return Err(bad(
                "at least 2 configurations per graph are required".into()
            ));
        }
        if self.opcode_vocab <= *CONFIGURABLE_OPCODES.iter().max().unwrap() as usize + 1 {
            return Err(bad("opcode vocabulary too small".into()));
        }
        Ok(())
    }
}

/// Hidden runtime tables of a synthetic collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub seed: u64,
    /// Constant cost per node of a graph.
    pub base_per_node_ns: u64,
    /// `[opcode][layout code]`.
    pub node_table: Vec<Vec<u64>>,
    /// `[source layout code][destination layout code]`.
    pub edge_table: Vec<Vec<u64>>,
    /// `[feature index][bucket]`, tile collections only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_table: Option<Vec<Vec<u64>>>,
}

/// Compact code of a node layout seen by the oracle: the minor-most output
/// axis and the minor-most input axis.
pub fn layout_code(layout: &LayoutConfig) -> usize {
    let out = layout.output[0].max(0) as usize;
    let inp = layout.input[0].max(0) as usize;
    out.min(MAX_RANK - 1) * MAX_RANK + inp.min(MAX_RANK - 1)
}

impl SyntheticOracle {
    fn base(&self, graph: &ComputationGraph) -> u64 {
        self.base_per_node_ns * graph.n_nodes() as u64
    }

    /// Runtime of a layout configuration (one entry per configurable node).
    pub fn layout_runtime(&self, graph: &ComputationGraph, layouts: &[LayoutConfig]) -> u64 {
        let n = graph.n_nodes();
        let mut code = vec![None; n];
        for (&node, layout) in graph.configurable_nodes.iter().zip(layouts) {
            code[node] = Some(layout_code(layout));
        }
        let mut total = self.base(graph);
        for (node, c) in code.iter().enumerate() {
            if let Some(c) = c {
                total += self.node_table[graph.opcodes[node] as usize][*c];
            }
        }
        for &(s, d) in &graph.edges {
            if let (Some(cs), Some(cd)) = (code[s], code[d]) {
                total += self.edge_table[cs][cd];
            }
        }
        total
    }

    pub fn tile_runtime(&self, graph: &ComputationGraph, features: &[f64]) -> u64 {
        let table = self.tile_table.as_ref().expect("tile oracle");
        let vocab = self.node_table.len();
        let mut total = self.base(graph);
        for (k, &f) in features.iter().enumerate() {
            let weight = 1 + graph
                .opcodes
                .iter()
                .filter(|&&o| o as usize == k % vocab)
                .count() as u64;
            total += weight * table[k][f as usize];
        }
        total
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub oracle: SyntheticOracle,
    pub graphs: Vec<GraphFile>,
}

fn permutation(rank: usize, rng: &mut ChaCha8Rng) -> [i8; LAYOUT_SLOTS] {
    let mut axes: Vec<i8> = (0..rank as i8).collect();
    axes.shuffle(rng);
    let mut out = [-1i8; LAYOUT_SLOTS];
    out[..rank].copy_from_slice(&axes);
    out
}

fn random_layout(rank: usize, rng: &mut ChaCha8Rng) -> LayoutConfig {
    LayoutConfig {
        output: permutation(rank, rng),
        input: permutation(rank, rng),
        kernel: permutation(rank, rng),
    }
}

fn random_graph(index: usize, p: &SyntheticParams, rng: &mut ChaCha8Rng) -> ComputationGraph {
    let n = rng.gen_range(p.min_nodes..=p.max_nodes);
    let others: Vec<u32> = (0..p.opcode_vocab as u32)
        .filter(|o| !CONFIGURABLE_OPCODES.contains(o))
        .collect();
    let mut opcodes = Vec::with_capacity(n);
    let mut node_features = Vec::with_capacity(n);
    let mut layout_ranks = Vec::with_capacity(n);
    for _ in 0..n {
        let op = if rng.gen_bool(0.4) {
            *CONFIGURABLE_OPCODES.choose(rng).unwrap()
        } else {
            *others.choose(rng).unwrap()
        };
        let rank = rng.gen_range(2..=MAX_RANK);
        let mut row = vec![0.0; NODE_FEAT_DIM];
        let dims: Vec<f64> = (0..rank)
            .map(|_| (1u64 << rng.gen_range(0..=8)) as f64)
            .collect();
        row[..rank].copy_from_slice(&dims);
        row[6] = rank as f64;
        row[7] = dims.iter().product();
        row[8] = dims.iter().sum();
        if 9 + (op as usize) < 100 {
            row[9 + op as usize] = 1.0;
        }
        for v in &mut row[100..110] {
            *v = rng.gen::<f64>();
        }
        // default minor-to-major order, zero padded like the raw data
        for k in 0..rank {
            row[NUMERIC_FEAT_DIM + k] = (rank - 1 - k) as f64;
        }
        opcodes.push(op);
        node_features.push(row);
        layout_ranks.push(rank);
    }
    let mut edges = Vec::new();
    for dst in 1..n {
        let lo = dst.saturating_sub(5);
        let mut candidates: Vec<usize> = (lo..dst).collect();
        candidates.shuffle(rng);
        let fan_in = if rng.gen_bool(0.3) { 2 } else { 1 };
        let mut parents: Vec<usize> = candidates.into_iter().take(fan_in).collect();
        parents.sort_unstable();
        edges.extend(parents.into_iter().map(|src| (src, dst)));
    }
    let configurable_nodes = (0..n)
        .filter(|&i| CONFIGURABLE_OPCODES.contains(&opcodes[i]))
        .collect();
    ComputationGraph {
        graph_id: format!("synth-{index:04}"),
        opcodes,
        node_features,
        edges,
        configurable_nodes,
        layout_ranks,
    }
}

fn layout_configs(
    graph: &ComputationGraph,
    p: &SyntheticParams,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<LayoutConfig>> {
    let ranks: Vec<usize> = graph
        .configurable_nodes
        .iter()
        .map(|&i| graph.layout_ranks[i])
        .collect();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<LayoutConfig> {
        ranks.iter().map(|&r| random_layout(r, rng)).collect()
    };
    match p.style {
        SamplingStyle::Random => (0..p.configs_per_graph).map(|_| draw(rng)).collect(),
        SamplingStyle::Default => {
            let base = draw(rng);
            let mut out = vec![base.clone()];
            while out.len() < p.configs_per_graph {
                let mut c = base.clone();
                if !ranks.is_empty() {
                    for _ in 0..rng.gen_range(1..=2) {
                        let j = rng.gen_range(0..ranks.len());
                        c[j] = random_layout(ranks[j], rng);
                    }
                }
                out.push(c);
            }
            out
        }
    }
}

/// Builds a synthetic collection in memory.
pub fn synthesize(p: &SyntheticParams) -> Result<SyntheticDataset, DatasetError> {
    p.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let node_table = (0..p.opcode_vocab)
        .map(|_| (0..LAYOUT_CODES).map(|_| rng.gen_range(0..=1000)).collect())
        .collect();
    // Adjacent nodes whose minor output axes disagree pay a conversion cost
    // that depends on the two axes but not on the edge direction.
    let mut mismatch = vec![vec![0u64; MAX_RANK]; MAX_RANK];
    for a in 0..MAX_RANK {
        for b in a + 1..MAX_RANK {
            let cost = rng.gen_range(p.edge_scale / 2..=p.edge_scale);
            mismatch[a][b] = cost;
            mismatch[b][a] = cost;
        }
    }
    let edge_table = (0..LAYOUT_CODES)
        .map(|cs| {
            (0..LAYOUT_CODES)
                .map(|cd| mismatch[cs / MAX_RANK][cd / MAX_RANK])
                .collect()
        })
        .collect();
    let tile_table = p.tile.then(|| {
        (0..CONFIG_FEAT_DIM)
            .map(|_| (0..TILE_BUCKETS).map(|_| rng.gen_range(0..=1000)).collect())
            .collect()
    });
    let oracle = SyntheticOracle {
        seed: p.seed,
        base_per_node_ns: 1000,
        node_table,
        edge_table,
        tile_table,
    };
    let kind = p.kind();
    let mut graphs = Vec::with_capacity(p.n_graphs);
    for index in 0..p.n_graphs {
        let graph = random_graph(index, p, &mut rng);
        let configs = if p.tile {
            let feats: Vec<Vec<f64>> = (0..p.configs_per_graph)
                .map(|_| {
                    (0..CONFIG_FEAT_DIM)
                        .map(|_| rng.gen_range(0..TILE_BUCKETS) as f64)
                        .collect()
                })
                .collect();
            let runtimes_ns = feats
                .iter()
                .map(|f| oracle.tile_runtime(&graph, f))
                .collect();
            ConfigurationSet {
                configs: Configs::Tile(feats),
                runtimes_ns,
            }
        } else {
            let layouts = layout_configs(&graph, p, &mut rng);
            let runtimes_ns = layouts
                .iter()
                .map(|c| oracle.layout_runtime(&graph, c))
                .collect();
            ConfigurationSet {
                configs: Configs::Layout(layouts),
                runtimes_ns,
            }
        };
        graphs.push(GraphFile {
            graph,
            configs,
            kind,
            node_origin: None,
        });
    }
    Ok(SyntheticDataset {
        manifest: Manifest::new(kind, p.opcode_vocab, vec!["train".into()]),
        oracle,
        graphs,
    })
}

/// Generates a synthetic collection and writes it under `out`.
pub fn generate_synthetic(
    p: &SyntheticParams,
    out: &Path,
) -> Result<SyntheticDataset, DatasetError> {
    let data = synthesize(p)?;
    let dir = data.manifest.split_dir(out, "train");
    for g in &data.graphs {
        g.save(&dir.join(format!("{}.json", g.graph.graph_id)))?;
    }
    save_manifest(out, &data.manifest)?;
    let mut bytes = serde_json::to_vec(&data.oracle).expect("oracle serializes");
    bytes.push(b'\n');
    write_bytes(&out.join(ORACLE_FILE), &bytes)?;
    Ok(data)
}
