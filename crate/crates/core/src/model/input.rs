use crate::autodiff::Tensor;
use crate::dataset::{
    ComputationGraph, ConfigurationSet, CONFIG_FEAT_DIM, LAYOUT_SLOTS, NUMERIC_FEAT_DIM,
};
use crate::preprocess::FeatureScaler;

use super::{ModelError, Neighbors, CONFIG_SLOTS, LAYOUT_VOCAB};

/// Per-graph tensors shared by every configuration batch of that graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub graph_id: String,
    /// Scaled `node_feat[..134]`, shape `[n_nodes, 134]`.
    pub numeric: Tensor,
    /// Output layout slots shifted to `0..7`, `n_nodes * 6` entries.
    pub node_slots: Vec<usize>,
    pub opcodes: Vec<usize>,
    pub neighbors: Neighbors,
    pub configurable_nodes: Vec<usize>,
}

fn slot_index(graph_id: &str, v: i64) -> Result<usize, ModelError> {
    let shifted = v + 1;
    if !(0..LAYOUT_VOCAB as i64).contains(&shifted) {
        return Err(ModelError::Input {
            graph_id: graph_id.to_string(),
            msg: format!("layout slot {v} outside -1..=5"),
        });
    }
    Ok(shifted as usize)
}

impl GraphInput {
    pub fn new(graph: &ComputationGraph, scaler: &FeatureScaler) -> Result<Self, ModelError> {
        let n = graph.n_nodes();
        let mut numeric = Vec::with_capacity(n * NUMERIC_FEAT_DIM);
        let mut node_slots = Vec::with_capacity(n * LAYOUT_SLOTS);
        for row in &graph.node_features {
            numeric.extend(scaler.scale_row(row));
            for &v in &row[NUMERIC_FEAT_DIM..] {
                node_slots.push(slot_index(&graph.graph_id, v as i64)?);
            }
        }
        Ok(Self {
            graph_id: graph.graph_id.clone(),
            numeric: Tensor::new(vec![n, NUMERIC_FEAT_DIM], numeric)?,
            node_slots,
            opcodes: graph.opcodes.iter().map(|&o| o as usize).collect(),
            neighbors: Neighbors::undirected(&graph.edges),
            configurable_nodes: graph.configurable_nodes.clone(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.opcodes.len()
    }
}

/// A batch of configurations of one graph, decompressed and ready to embed.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigBatch {
    /// Shifted layout slots, `n_configs * n_configurable * 18` entries in
    /// (configuration, node, output/input/kernel slot) order.
    Layout { slots: Vec<usize>, n_configs: usize },
    /// Scaled tile features `[n_configs, 24]`.
    Tile { features: Tensor },
}

impl ConfigBatch {
    pub fn len(&self) -> usize {
        match self {
            ConfigBatch::Layout { n_configs, .. } => *n_configs,
            ConfigBatch::Tile { features } => features.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers configurations `indices` of `set`, decompressing layouts on
    /// the fly.
    pub fn from_set(
        graph: &ComputationGraph,
        set: &ConfigurationSet,
        indices: &[usize],
        scaler: &FeatureScaler,
    ) -> Result<Self, ModelError> {
        let id = graph.graph_id.as_str();
        let out_of_range = |i: usize| ModelError::Input {
            graph_id: id.to_string(),
            msg: format!(
                "configuration {i} out of range for {} configurations",
                set.len()
            ),
        };
        if set.is_tile() {
            let mut data = Vec::with_capacity(indices.len() * CONFIG_FEAT_DIM);
            for &i in indices {
                let f = set.tile_features(i).ok_or_else(|| out_of_range(i))?;
                data.extend(scaler.scale_config(f));
            }
            return Ok(ConfigBatch::Tile {
                features: Tensor::new(vec![indices.len(), CONFIG_FEAT_DIM], data)?,
            });
        }
        let m = graph.configurable_nodes.len();
        let mut slots = Vec::with_capacity(indices.len() * m * CONFIG_SLOTS);
        for &i in indices {
            let layouts = set.layout(i).ok_or_else(|| out_of_range(i))?;
            if layouts.len() != m {
                return Err(ModelError::MissingConfig {
                    graph_id: id.to_string(),
                    config: i,
                    got: layouts.len(),
                    expected: m,
                });
            }
            for layout in &layouts {
                for v in layout.slots() {
                    slots.push(slot_index(id, v as i64)?);
                }
            }
        }
        Ok(ConfigBatch::Layout {
            slots,
            n_configs: indices.len(),
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{Configs, LayoutConfig, NODE_FEAT_DIM};

    pub(crate) fn identity_scaler() -> FeatureScaler {
        FeatureScaler {
            mean: vec![0.0; NUMERIC_FEAT_DIM],
            std: vec![1.0; NUMERIC_FEAT_DIM],
            config_mean: None,
            config_std: None,
            provenance: "test".into(),
            fitted_on: vec![],
        }
    }

    fn layout(a: i8, b: i8) -> LayoutConfig {
        LayoutConfig {
            output: [a, b, -1, -1, -1, -1],
            input: [b, a, -1, -1, -1, -1],
            kernel: [-1; 6],
        }
    }

    pub(crate) fn graph() -> (ComputationGraph, ConfigurationSet) {
        let n = 5;
        let node_features = (0..n)
            .map(|i| {
                let mut row = vec![0.0; NODE_FEAT_DIM];
                row[0] = i as f64 * 0.5 - 1.0;
                row[3] = (i * i) as f64 * 0.1;
                row[NUMERIC_FEAT_DIM] = 1.0;
                row[NUMERIC_FEAT_DIM + 1] = 0.0;
                for s in &mut row[NUMERIC_FEAT_DIM + 2..] {
                    *s = -1.0;
                }
                row
            })
            .collect();
        let g = ComputationGraph {
            graph_id: "fixture".into(),
            opcodes: vec![0, 1, 4, 2, 5],
            node_features,
            edges: vec![(0, 1), (1, 2), (2, 3), (1, 4)],
            configurable_nodes: vec![1, 3],
            layout_ranks: vec![2; n],
        };
        let set = ConfigurationSet {
            configs: Configs::Layout(vec![
                vec![layout(0, 1), layout(1, 0)],
                vec![layout(1, 0), layout(1, 0)],
                vec![layout(0, 1), layout(0, 1)],
            ]),
            runtimes_ns: vec![30, 10, 20],
        };
        (g, set)
    }

    pub(crate) fn fixture() -> (GraphInput, ConfigBatch) {
        let (g, set) = graph();
        let s = identity_scaler();
        (
            GraphInput::new(&g, &s).unwrap(),
            ConfigBatch::from_set(&g, &set, &[0, 1, 2], &s).unwrap(),
        )
    }

    #[test]
    fn slots_are_shifted() {
        let (g, b) = fixture();
        assert_eq!(&g.node_slots[..6], &[2, 1, 0, 0, 0, 0]);
        let ConfigBatch::Layout { slots, n_configs } = b else {
            panic!()
        };
        assert_eq!(n_configs, 3);
        assert_eq!(slots.len(), 3 * 2 * 18);
        assert_eq!(&slots[..6], &[1, 2, 0, 0, 0, 0]);
    }

    #[test]
    fn missing_node_layout_is_reported() {
        let (g, mut set) = graph();
        if let Configs::Layout(c) = &mut set.configs {
            c[1].pop();
        }
        let err = ConfigBatch::from_set(&g, &set, &[1], &identity_scaler()).unwrap_err();
        assert!(matches!(
            err,
            ModelError::MissingConfig {
                config: 1,
                got: 1,
                expected: 2,
                ..
            }
        ));
    }
}
