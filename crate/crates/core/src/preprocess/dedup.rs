use std::collections::HashMap;

use crate::dataset::{Configs, ConfigurationSet};

use super::CompressedLayout;

#[derive(Debug, PartialEq, Eq, Hash)]
enum Key {
    Layout(Vec<CompressedLayout>),
    Tile(Vec<u64>),
}

fn keys(set: &ConfigurationSet) -> Vec<Key> {
    match &set.configs {
        Configs::Layout(c) => c
            .iter()
            .map(|cfg| Key::Layout(cfg.iter().map(CompressedLayout::compress).collect()))
            .collect(),
        Configs::Compressed(c) => c.iter().map(|cfg| Key::Layout(cfg.clone())).collect(),
        Configs::Tile(c) => c
            .iter()
            .map(|f| Key::Tile(f.iter().map(|v| v.to_bits()).collect()))
            .collect(),
    }
}

fn select<T: Clone>(items: &[T], keep: &[usize]) -> Vec<T> {
    keep.iter().map(|&i| items[i].clone()).collect()
}

/// Drops repeated configurations. The first occurrence of each distinct
/// configuration stays in place and takes the minimum runtime of its group.
/// Runtimes do not participate in the comparison.
pub fn dedup(set: &ConfigurationSet) -> ConfigurationSet {
    let mut slot_of: HashMap<Key, usize> = HashMap::new();
    let mut keep = Vec::new();
    let mut runtimes: Vec<u64> = Vec::new();
    for (i, key) in keys(set).into_iter().enumerate() {
        let r = set.runtimes_ns[i];
        match slot_of.get(&key) {
            Some(&slot) => runtimes[slot] = runtimes[slot].min(r),
            None => {
                slot_of.insert(key, keep.len());
                keep.push(i);
                runtimes.push(r);
            }
        }
    }
    let configs = match &set.configs {
        Configs::Layout(c) => Configs::Layout(select(c, &keep)),
        Configs::Compressed(c) => Configs::Compressed(select(c, &keep)),
        Configs::Tile(c) => Configs::Tile(select(c, &keep)),
    };
    ConfigurationSet {
        configs,
        runtimes_ns: runtimes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LayoutConfig;

    fn layout(v: i8) -> Vec<LayoutConfig> {
        vec![LayoutConfig {
            output: [v, -1, -1, -1, -1, -1],
            ..LayoutConfig::PADDING
        }]
    }

    #[test]
    fn keeps_min_runtime_in_first_position() {
        let (a, b) = (layout(0), layout(1));
        let set = ConfigurationSet {
            configs: Configs::Layout(vec![a.clone(), b.clone(), a.clone()]),
            runtimes_ns: vec![10, 7, 9],
        };
        let out = dedup(&set);
        assert_eq!(out.configs, Configs::Layout(vec![a, b]));
        assert_eq!(out.runtimes_ns, vec![9, 7]);
    }

    #[test]
    fn distinct_set_unchanged() {
        let set = ConfigurationSet {
            configs: Configs::Layout(vec![layout(0), layout(1), layout(2)]),
            runtimes_ns: vec![3, 2, 1],
        };
        assert_eq!(dedup(&set), set);
    }

    #[test]
    fn all_identical_collapse_to_global_min() {
        let set = ConfigurationSet {
            configs: Configs::Tile(vec![vec![1.0; 24]; 4]),
            runtimes_ns: vec![8, 3, 5, 4],
        };
        let out = dedup(&set);
        assert_eq!(out.len(), 1);
        assert_eq!(out.runtimes_ns, vec![3]);
    }

    #[test]
    fn compressed_and_raw_agree() {
        let set = ConfigurationSet {
            configs: Configs::Layout(vec![layout(2), layout(2), layout(4)]),
            runtimes_ns: vec![5, 1, 6],
        };
        assert_eq!(dedup(&set.compressed()), dedup(&set).compressed());
    }
}
