//! Training-ready graphs: re-padding, pruning, deduplication, compression and
//! feature scaling.

mod compress;
mod dedup;
mod prune;
mod scaler;

pub use compress::{compress_layout, decompress_layout, CompressedLayout, LAYOUT_CODE_COUNT};
pub use dedup::dedup;
pub use prune::{prune, PrunedGraph};
pub use scaler::{fit_scaler, FeatureScaler, STD_FLOOR};

use std::fs;
use std::path::Path;

use log::info;
use thiserror::Error;

use crate::dataset::{
    load_dataset, save_manifest, ComputationGraph, DatasetError, GraphFile, PreprocessInfo,
    LAYOUT_SLOTS, NUMERIC_FEAT_DIM, ORACLE_FILE,
};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("layout slot {0} outside -1..=5")]
    LayoutSlot(i8),
    #[error("layout code {0} outside 0..117649")]
    CodeOutOfRange(u32),
    #[error("cannot fit a scaler on an empty training set")]
    EmptyTrainingSet,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Rewrites the output-layout slots `node_feat[134..140]` so that every slot
/// at or beyond the node's tensor rank holds `-1`. Slots inside the rank are
/// genuine axis indices and stay as they are, zeros included.
pub fn repad_node_feat(graph: &ComputationGraph) -> ComputationGraph {
    let mut out = graph.clone();
    for (row, &rank) in out.node_features.iter_mut().zip(&graph.layout_ranks) {
        for k in rank.min(LAYOUT_SLOTS)..LAYOUT_SLOTS {
            row[NUMERIC_FEAT_DIM + k] = -1.0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct PreprocessOptions {
    pub prune: bool,
    pub dedup: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            prune: true,
            dedup: true,
        }
    }
}

/// Runs the per-graph pipeline. Returns `None` for a layout graph left with no
/// configurable node, which layout training cannot use.
pub fn preprocess_graph(file: &GraphFile, opts: PreprocessOptions) -> Option<GraphFile> {
    let repadded = repad_node_feat(&file.graph);
    let (graph, node_origin) = if opts.prune && !file.kind.is_tile() {
        let p = prune(&repadded);
        if p.is_empty() {
            return None;
        }
        (p.graph, Some(p.node_origin))
    } else {
        (repadded, file.node_origin.clone())
    };
    let configs = if opts.dedup {
        dedup(&file.configs)
    } else {
        file.configs.clone()
    };
    Some(GraphFile {
        graph,
        configs: configs.compressed(),
        kind: file.kind,
        node_origin,
    })
}

/// Preprocesses every split of the dataset at `input` into `output`. The
/// manifest gains the step flags and a scaler fitted on the `train` split.
pub fn preprocess_dataset(
    input: &Path,
    output: &Path,
    opts: PreprocessOptions,
) -> Result<PreprocessInfo, PreprocessError> {
    let manifest = crate::dataset::load_manifest(input)?;
    let mut info = PreprocessInfo {
        compressed: true,
        deduplicated: opts.dedup,
        pruned: opts.prune,
        repadded: true,
        skipped_graphs: Vec::new(),
    };
    let mut out_manifest = manifest.clone();
    for split in &manifest.splits {
        let data = load_dataset(input, split)?;
        let dir = manifest.split_dir(output, split);
        let mut kept = Vec::new();
        for g in &data.graphs {
            match preprocess_graph(g, opts) {
                Some(p) => {
                    p.save(&dir.join(format!("{}.json", p.graph.graph_id)))?;
                    kept.push(p);
                }
                None => info.skipped_graphs.push(g.graph.graph_id.clone()),
            }
        }
        info!(
            "{split}: kept {} of {} graphs",
            kept.len(),
            data.graphs.len()
        );
        if split == "train" {
            let refs: Vec<&GraphFile> = kept.iter().collect();
            out_manifest.scaler = Some(fit_scaler(&refs, "split:train")?);
        }
    }
    out_manifest.preprocess = Some(info.clone());
    save_manifest(output, &out_manifest)?;
    let oracle = input.join(ORACLE_FILE);
    if oracle.exists() {
        fs::copy(&oracle, output.join(ORACLE_FILE)).map_err(|source| DatasetError::Io {
            path: oracle.clone(),
            source,
        })?;
    }
    Ok(info)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NODE_FEAT_DIM;

    fn graph_with_slots(slots: &[[f64; 6]], ranks: &[usize]) -> ComputationGraph {
        ComputationGraph {
            graph_id: "r".into(),
            opcodes: vec![0; slots.len()],
            node_features: slots
                .iter()
                .map(|s| {
                    let mut r = vec![0.0; NODE_FEAT_DIM];
                    r[NUMERIC_FEAT_DIM..].copy_from_slice(s);
                    r
                })
                .collect(),
            edges: vec![],
            configurable_nodes: vec![],
            layout_ranks: ranks.to_vec(),
        }
    }

    fn slots(g: &ComputationGraph) -> Vec<[i8; 6]> {
        (0..g.n_nodes()).map(|i| g.layout_slots(i)).collect()
    }

    #[test]
    fn trailing_zeros_beyond_rank_become_padding() {
        let g = graph_with_slots(
            &[
                [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                [2.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            ],
            &[2, 3],
        );
        let r = repad_node_feat(&g);
        assert_eq!(
            slots(&r),
            vec![[1, 0, -1, -1, -1, -1], [2, 0, 1, -1, -1, -1]]
        );
    }

    #[test]
    fn repad_is_identity_on_padded_input() {
        let g = graph_with_slots(&[[0.0, 1.0, -1.0, -1.0, -1.0, -1.0]], &[2]);
        assert_eq!(repad_node_feat(&g), g);
    }

    #[test]
    fn genuine_zero_axis_preserved() {
        let g = graph_with_slots(&[[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]], &[1]);
        assert_eq!(slots(&repad_node_feat(&g)), vec![[0, -1, -1, -1, -1, -1]]);
    }
}
