#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgraph::dataset::{
    synthesize, CollectionKind, ComputationGraph, Configs, ConfigurationSet, GraphFile,
    LayoutConfig, SyntheticParams, NODE_FEAT_DIM, NUMERIC_FEAT_DIM,
};
use tgraph::model::{ConfigBatch, GraphInput, ModelConfig, TGraphModel};
use tgraph::preprocess::FeatureScaler;

pub fn identity_scaler() -> FeatureScaler {
    FeatureScaler {
        mean: vec![0.0; NUMERIC_FEAT_DIM],
        std: vec![1.0; NUMERIC_FEAT_DIM],
        config_mean: None,
        config_std: None,
        provenance: "test".into(),
        fitted_on: vec![],
    }
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        se_reduction: 2,
        ..ModelConfig::default()
    }
}

fn permutation(rank: usize, rng: &mut ChaCha8Rng) -> [i8; 6] {
    let mut v = [-1i8; 6];
    let mut axes: Vec<i8> = (0..rank as i8).collect();
    for i in (1..axes.len()).rev() {
        axes.swap(i, rng.gen_range(0..=i));
    }
    v[..rank].copy_from_slice(&axes);
    v
}

pub fn random_layout(rank: usize, rng: &mut ChaCha8Rng) -> LayoutConfig {
    LayoutConfig {
        output: permutation(rank, rng),
        input: permutation(rank, rng),
        kernel: permutation(rank, rng),
    }
}

/// A random valid layout graph with `n` nodes, its configurations and the
/// per-node ranks.
pub fn random_graph(seed: u64, n: usize, n_configs: usize) -> GraphFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
    let node_features = (0..n)
        .map(|i| {
            let mut row = vec![0.0; NODE_FEAT_DIM];
            for v in &mut row[..20] {
                *v = rng.gen_range(-2.0..2.0);
            }
            let perm = permutation(ranks[i], &mut rng);
            for (k, &p) in perm.iter().enumerate() {
                row[NUMERIC_FEAT_DIM + k] = p as f64;
            }
            row
        })
        .collect();
    let mut edges = Vec::new();
    for d in 1..n {
        edges.push((rng.gen_range(0..d), d));
    }
    let mut configurable_nodes: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
    if configurable_nodes.is_empty() {
        configurable_nodes.push(0);
    }
    let configs: Vec<Vec<LayoutConfig>> = (0..n_configs)
        .map(|_| {
            configurable_nodes
                .iter()
                .map(|&i| random_layout(ranks[i], &mut rng))
                .collect()
        })
        .collect();
    let runtimes_ns = (0..n_configs).map(|_| rng.gen_range(1..10_000)).collect();
    GraphFile {
        graph: ComputationGraph {
            graph_id: format!("g{seed}"),
            opcodes: (0..n).map(|_| rng.gen_range(0..6)).collect(),
            node_features,
            edges,
            configurable_nodes,
            layout_ranks: ranks,
        },
        configs: ConfigurationSet {
            configs: Configs::Layout(configs),
            runtimes_ns,
        },
        kind: "layout:xla:random".parse::<CollectionKind>().unwrap(),
        node_origin: None,
    }
}

pub fn inputs(file: &GraphFile, indices: &[usize]) -> (GraphInput, ConfigBatch) {
    let s = identity_scaler();
    (
        GraphInput::new(&file.graph, &s).unwrap(),
        ConfigBatch::from_set(&file.graph, &file.configs, indices, &s).unwrap(),
    )
}

pub fn model(seed: u64) -> TGraphModel {
    TGraphModel::new(small_config(), 6, seed).unwrap()
}

pub fn synthetic(seed: u64, graphs: usize, configs: usize) -> Vec<GraphFile> {
    synthesize(&SyntheticParams::new(seed, graphs, (6, 14), configs))
        .unwrap()
        .graphs
}
