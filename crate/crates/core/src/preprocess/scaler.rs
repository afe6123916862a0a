use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::dataset::{ComputationGraph, GraphFile, NUMERIC_FEAT_DIM};

/// Columns whose standard deviation falls below this are only centered.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-column standardization of `node_feat[..134]` (and of tile
/// `config_feat`, when fitted on a tile collection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    /// Divisors; floored columns store 1.0.
    pub std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_std: Option<Vec<f64>>,
    /// Free-form label of the fitting population, e.g. `fold:3`.
    pub provenance: String,
    /// Graph ids the statistics were computed from.
    pub fitted_on: Vec<String>,
}

fn column_stats<'a>(
    rows: impl Iterator<Item = &'a [f64]> + Clone,
    dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut count = 0usize;
    let mut sum = vec![0.0; dim];
    for row in rows.clone() {
        count += 1;
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; dim];
    for row in rows {
        for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = sq
        .iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

/// Fits column statistics over every node of `graphs` (and every tile
/// configuration, for tile collections). Two passes: mean, then variance.
pub fn fit_scaler(
    graphs: &[&GraphFile],
    provenance: &str,
) -> Result<FeatureScaler, PreprocessError> {
    let node_count: usize = graphs.iter().map(|g| g.graph.n_nodes()).sum();
    if node_count == 0 {
        return Err(PreprocessError::EmptyTrainingSet);
    }
    let rows = graphs
        .iter()
        .flat_map(|g| g.graph.node_features.iter().map(|r| &r[..NUMERIC_FEAT_DIM]));
    let (mean, std) = column_stats(rows, NUMERIC_FEAT_DIM);

    let tile: Vec<&GraphFile> = graphs
        .iter()
        .copied()
        .filter(|g| g.configs.is_tile())
        .collect();
    let (config_mean, config_std) = if tile.is_empty() {
        (None, None)
    } else {
        let rows = tile
            .iter()
            .flat_map(|g| (0..g.configs.len()).map(move |i| g.configs.tile_features(i).unwrap()));
        let (m, s) = column_stats(rows, crate::dataset::CONFIG_FEAT_DIM);
        (Some(m), Some(s))
    };
    Ok(FeatureScaler {
        mean,
        std,
        config_mean,
        config_std,
        provenance: provenance.to_string(),
        fitted_on: graphs.iter().map(|g| g.graph.graph_id.clone()).collect(),
    })
}

impl FeatureScaler {
    pub fn scale_row(&self, row: &[f64]) -> Vec<f64> {
        row[..NUMERIC_FEAT_DIM]
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Standardizes `node_feat[..134]`; layout slots are left untouched.
    pub fn apply(&self, graph: &ComputationGraph) -> ComputationGraph {
        let mut out = graph.clone();
        for row in &mut out.node_features {
            let scaled = self.scale_row(row);
            row[..NUMERIC_FEAT_DIM].copy_from_slice(&scaled);
        }
        out
    }

    pub fn unapply(&self, graph: &ComputationGraph) -> ComputationGraph {
        let mut out = graph.clone();
        for row in &mut out.node_features {
            for ((v, m), s) in row[..NUMERIC_FEAT_DIM]
                .iter_mut()
                .zip(&self.mean)
                .zip(&self.std)
            {
                *v = *v * s + m;
            }
        }
        out
    }

    /// Standardized tile `config_feat`; identity when no tile statistics were fitted.
    pub fn scale_config(&self, features: &[f64]) -> Vec<f64> {
        match (&self.config_mean, &self.config_std) {
            (Some(m), Some(s)) => features
                .iter()
                .zip(m.iter().zip(s))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
            _ => features.to_vec(),
        }
    }

    pub fn was_fitted_on(&self, graph_id: &str) -> bool {
        self.fitted_on.iter().any(|g| g == graph_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CollectionKind, Configs, ConfigurationSet, NODE_FEAT_DIM};

    fn file(rows: Vec<Vec<f64>>) -> GraphFile {
        let n = rows.len();
        GraphFile {
            graph: ComputationGraph {
                graph_id: "s".into(),
                opcodes: vec![0; n],
                node_features: rows,
                edges: vec![],
                configurable_nodes: vec![],
                layout_ranks: vec![0; n],
            },
            configs: ConfigurationSet {
                configs: Configs::Layout(vec![vec![]]),
                runtimes_ns: vec![1],
            },
            kind: "layout:xla:random".parse::<CollectionKind>().unwrap(),
            node_origin: None,
        }
    }

    #[test]
    fn constant_column_is_centered_not_divided() {
        let rows = (0..4)
            .map(|i| {
                let mut r = vec![7.0; NODE_FEAT_DIM];
                r[1] = i as f64 * 1000.0;
                r
            })
            .collect();
        let f = file(rows);
        let s = fit_scaler(&[&f], "test").unwrap();
        assert_eq!(s.std[0], 1.0);
        let g = s.apply(&f.graph);
        assert!(g.node_features.iter().all(|r| r[0] == 0.0));
        assert_eq!(g.node_features[0][NUMERIC_FEAT_DIM], 7.0);
    }

    #[test]
    fn fitted_graph_has_zero_mean_unit_std() {
        let rows = (0..9)
            .map(|i| {
                (0..NODE_FEAT_DIM)
                    .map(|k| ((i * 31 + k * 17) % 23) as f64 * (k as f64 + 1.0))
                    .collect()
            })
            .collect();
        let f = file(rows);
        let s = fit_scaler(&[&f], "test").unwrap();
        let g = s.apply(&f.graph);
        for k in 0..NUMERIC_FEAT_DIM {
            let col: Vec<f64> = g.node_features.iter().map(|r| r[k]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-6);
            if s.std[k] != 1.0 {
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
                assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
        let back = s.unapply(&g);
        for (a, b) in back
            .node_features
            .iter()
            .flatten()
            .zip(f.graph.node_features.iter().flatten())
        {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn empty_population_rejected() {
        assert!(matches!(
            fit_scaler(&[], "x"),
            Err(PreprocessError::EmptyTrainingSet)
        ));
    }
}
