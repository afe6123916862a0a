use crate::dataset::ComputationGraph;

/// A graph reduced to configurable nodes and their direct neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedGraph {
    pub graph: ComputationGraph,
    /// Original index of each retained node, increasing.
    pub node_origin: Vec<usize>,
}

impl PrunedGraph {
    /// True when the source graph had no configurable node, leaving nothing to rank.
    pub fn is_empty(&self) -> bool {
        self.graph.configurable_nodes.is_empty()
    }
}

/// Keeps every configurable node and every node joined to one by an edge in
/// either direction. Retained edges are the original edges whose endpoints
/// both survive. The result may be disconnected.
pub fn prune(graph: &ComputationGraph) -> PrunedGraph {
    let n = graph.n_nodes();
    let mut configurable = vec![false; n];
    for &c in &graph.configurable_nodes {
        configurable[c] = true;
    }
    let mut keep = configurable.clone();
    for &(s, d) in &graph.edges {
        if configurable[s] {
            keep[d] = true;
        }
        if configurable[d] {
            keep[s] = true;
        }
    }
    let node_origin: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let mut new_index = vec![usize::MAX; n];
    for (new, &old) in node_origin.iter().enumerate() {
        new_index[old] = new;
    }
    let edges = graph
        .edges
        .iter()
        .filter(|(s, d)| keep[*s] && keep[*d])
        .map(|&(s, d)| (new_index[s], new_index[d]))
        .collect();
    PrunedGraph {
        graph: ComputationGraph {
            graph_id: graph.graph_id.clone(),
            opcodes: node_origin.iter().map(|&i| graph.opcodes[i]).collect(),
            node_features: node_origin
                .iter()
                .map(|&i| graph.node_features[i].clone())
                .collect(),
            edges,
            configurable_nodes: graph
                .configurable_nodes
                .iter()
                .map(|&c| new_index[c])
                .collect(),
            layout_ranks: node_origin.iter().map(|&i| graph.layout_ranks[i]).collect(),
        },
        node_origin,
    }
}
