//! Isolation-tree ensemble construction.
//!
//! Each tree partitions a random subsample of `n` rows by recursive
//! uniform-feature, uniform-threshold splits. A cell stops splitting once it
//! holds a single point or reaches the depth cap `d_max = log2(n)`; the
//! subsample size is constrained to a power of two so the cap and the size
//! stay consistent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::math::ExpectedDepthTable;

/// Ensemble configuration. `subsample_size` must be a power of two; the
/// depth cap is derived from it and never set directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    subsample_size: usize,
    tree_count: usize,
    seed: u64,
    max_depth: usize,
}

impl ForestConfig {
    pub fn new(subsample_size: usize, tree_count: usize, seed: u64) -> Result<Self> {
        if subsample_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "subsample size must be at least 2, got {subsample_size}"
            )));
        }
        if !subsample_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "subsample size must be a power of two, got {subsample_size}"
            )));
        }
        if tree_count == 0 {
            return Err(Error::InvalidConfig("tree count must be at least 1".into()));
        }
        Ok(ForestConfig {
            subsample_size,
            tree_count,
            seed,
            max_depth: subsample_size.trailing_zeros() as usize,
        })
    }

    pub fn subsample_size(&self) -> usize {
        self.subsample_size
    }

    pub fn tree_count(&self) -> usize {
        self.tree_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Clamps the subsample size to the largest power of two that the
    /// dataset can supply, recomputing the depth cap.
    fn clamped_to(&self, n_rows: usize) -> Self {
        if self.subsample_size <= n_rows {
            return self.clone();
        }
        let clamped = prev_power_of_two(n_rows);
        log::warn!(
            "subsample size {} exceeds the {} available rows; clamping to {}",
            self.subsample_size,
            n_rows,
            clamped
        );
        ForestConfig {
            subsample_size: clamped,
            tree_count: self.tree_count,
            seed: self.seed,
            max_depth: clamped.trailing_zeros() as usize,
        }
    }
}

fn prev_power_of_two(n: usize) -> usize {
    debug_assert!(n >= 2);
    let mut p = 1;
    while p * 2 <= n {
        p *= 2;
    }
    p
}

/// A node in the flat, index-linked node array of a tree. Children always
/// appear after their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Internal {
        feature: u32,
        split: f64,
        size: u32,
        left: u32,
        right: u32,
    },
    Leaf {
        size: u32,
        depth: u32,
    },
}

impl TreeNode {
    /// Training-subsample occupancy of the node's cell.
    #[inline]
    pub fn size(&self) -> usize {
        match self {
            TreeNode::Internal { size, .. } => *size as usize,
            TreeNode::Leaf { size, .. } => *size as usize,
        }
    }
}

/// One isolation tree: a flat node array rooted at index 0 plus the indices
/// of the dataset rows it was grown from.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<TreeNode>,
    subsample_indices: Vec<u32>,
    n_features: usize,
}

impl IsolationTree {
    /// Rebuilds a tree from a persisted node array. Subsample indices are
    /// fit-time metadata and stay empty here.
    pub(crate) fn from_nodes(nodes: Vec<TreeNode>, n_features: usize) -> Self {
        IsolationTree {
            nodes,
            subsample_indices: Vec::new(),
            n_features,
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn subsample_indices(&self) -> &[u32] {
        &self.subsample_indices
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }
}

/// A fitted ensemble, immutable and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    config: ForestConfig,
    feature_names: Vec<String>,
    trees: Vec<IsolationTree>,
    depth_table: ExpectedDepthTable,
}

impl ForestModel {
    pub(crate) fn from_parts(
        config: ForestConfig,
        feature_names: Vec<String>,
        trees: Vec<IsolationTree>,
        depth_table: ExpectedDepthTable,
    ) -> Self {
        ForestModel {
            config,
            feature_names,
            trees,
            depth_table,
        }
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn depth_table(&self) -> &ExpectedDepthTable {
        &self.depth_table
    }

    /// `E[d(n)]`, the depth normalizer for the configured subsample size.
    pub fn expected_depth_norm(&self) -> f64 {
        self.depth_table.get(self.config.subsample_size)
    }
}

/// Per-tree RNG stream: one ChaCha key per master seed, one counter stream
/// per tree, so construction order and thread count cannot shift the draws.
fn tree_rng(seed: u64, tree_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree_index);
    rng
}

/// Fits an isolation forest. For a fixed `(data, config)` the result is
/// bit-identical across runs and thread counts.
pub fn fit(data: &Dataset, config: &ForestConfig) -> Result<ForestModel> {
    if data.n_rows() < 2 {
        return Err(Error::EmptyDataset);
    }
    for (i, v) in data.values().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                row: i / data.n_features(),
                col: i % data.n_features(),
            });
        }
    }
    let config = config.clamped_to(data.n_rows());
    let depth_table = ExpectedDepthTable::up_to(config.subsample_size);

    let trees = exec::map_indexed(config.tree_count, |t| {
        let mut rng = tree_rng(config.seed, t as u64);
        let subsample: Vec<u32> = rand::seq::index::sample(
            &mut rng,
            data.n_rows(),
            config.subsample_size,
        )
        .iter()
        .map(|i| i as u32)
        .collect();
        build_tree(data, subsample, config.max_depth, &mut rng)
    });

    Ok(ForestModel {
        config,
        feature_names: data.feature_names().to_vec(),
        trees,
        depth_table,
    })
}

/// Grows a single tree over `subsample` with the supplied RNG.
///
/// Cells become leaves when they hold one point, reach `max_depth`, or are
/// constant in every feature. Split thresholds are drawn from the half-open
/// `[min, max)` range of the chosen feature over the cell, so both children
/// are always occupied; ties route left (`x <= split`).
pub fn build_tree<R: Rng>(
    data: &Dataset,
    subsample: Vec<u32>,
    max_depth: usize,
    rng: &mut R,
) -> IsolationTree {
    let mut nodes = Vec::with_capacity(2 * subsample.len());
    grow(&mut nodes, data, subsample.clone(), 0, max_depth as u32, rng);
    IsolationTree {
        nodes,
        subsample_indices: subsample,
        n_features: data.n_features(),
    }
}

fn grow<R: Rng>(
    nodes: &mut Vec<TreeNode>,
    data: &Dataset,
    cell: Vec<u32>,
    depth: u32,
    max_depth: u32,
    rng: &mut R,
) -> u32 {
    let size = cell.len() as u32;
    let leaf = |nodes: &mut Vec<TreeNode>| {
        nodes.push(TreeNode::Leaf { size, depth });
        nodes.len() as u32 - 1
    };
    if cell.len() <= 1 || depth >= max_depth {
        return leaf(nodes);
    }
    let Some((feature, split)) = draw_split(data, &cell, rng) else {
        // every feature is constant over this cell
        return leaf(nodes);
    };

    let mut left_cell = Vec::new();
    let mut right_cell = Vec::new();
    for &row in &cell {
        if data.value(row as usize, feature as usize) <= split {
            left_cell.push(row);
        } else {
            right_cell.push(row);
        }
    }
    debug_assert!(!left_cell.is_empty() && !right_cell.is_empty());

    let index = nodes.len();
    nodes.push(TreeNode::Leaf { size: 0, depth: 0 }); // placeholder
    let left = grow(nodes, data, left_cell, depth + 1, max_depth, rng);
    let right = grow(nodes, data, right_cell, depth + 1, max_depth, rng);
    nodes[index] = TreeNode::Internal {
        feature,
        split,
        size,
        left,
        right,
    };
    index as u32
}

/// Picks a split feature uniformly. If the first pick is constant over the
/// cell, falls back to a uniform choice among the features that still admit
/// a split (equivalent to retrying without replacement); returns `None`
/// when none does.
fn draw_split<R: Rng>(data: &Dataset, cell: &[u32], rng: &mut R) -> Option<(u32, f64)> {
    let d = data.n_features();
    let first = rng.random_range(0..d);
    if let Some(range) = feature_span(data, cell, first) {
        return Some((first as u32, draw_threshold(range, rng)));
    }
    let candidates: Vec<usize> = (0..d)
        .filter(|&f| f != first && feature_span(data, cell, f).is_some())
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let f = candidates[rng.random_range(0..candidates.len())];
    let range = feature_span(data, cell, f).expect("candidate admits a split");
    Some((f as u32, draw_threshold(range, rng)))
}

fn draw_threshold<R: Rng>((min, max): (f64, f64), rng: &mut R) -> f64 {
    let split = rng.random_range(min..max);
    // keep the half-open contract even if the sampler grazes the upper edge
    if split < max {
        split
    } else {
        min
    }
}

/// `(min, max)` of a feature over the cell, or `None` when constant.
fn feature_span(data: &Dataset, cell: &[u32], feature: usize) -> Option<(f64, f64)> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &row in cell {
        let v = data.value(row as usize, feature);
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    (min < max).then_some((min, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_dim(values: &[f64]) -> Dataset {
        Dataset::from_rows(
            vec!["x".to_string()],
            values.iter().map(|v| vec![*v]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_bad_sizes() {
        assert!(ForestConfig::new(0, 10, 0).is_err());
        assert!(ForestConfig::new(1, 10, 0).is_err());
        assert!(ForestConfig::new(100, 10, 0).is_err());
        assert!(ForestConfig::new(64, 0, 0).is_err());
        let cfg = ForestConfig::new(64, 10, 0).unwrap();
        assert_eq!(cfg.max_depth(), 6);
    }

    #[test]
    fn constant_data_yields_single_leaf_trees() {
        let data = Dataset::from_rows(
            vec!["a".to_string(), "b".to_string()],
            vec![vec![1.0, 2.0]; 4],
        )
        .unwrap();
        let model = fit(&data, &ForestConfig::new(4, 10, 3).unwrap()).unwrap();
        for tree in model.trees() {
            assert_eq!(tree.nodes().len(), 1);
            assert_eq!(tree.root(), &TreeNode::Leaf { size: 4, depth: 0 });
        }
    }

    #[test]
    fn pair_subsample_splits_once() {
        let data = one_dim(&[0.0, 1.0]);
        let model = fit(&data, &ForestConfig::new(2, 1, 9).unwrap()).unwrap();
        let tree = &model.trees()[0];
        assert_eq!(tree.nodes().len(), 3);
        match tree.root() {
            TreeNode::Internal { size, split, .. } => {
                assert_eq!(*size, 2);
                assert!((0.0..1.0).contains(split));
            }
            other => panic!("expected a root split, got {other:?}"),
        }
        let leaves: Vec<_> = tree
            .nodes()
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .collect();
        assert_eq!(leaves.len(), 2);
        for leaf in leaves {
            assert_eq!(leaf, &TreeNode::Leaf { size: 1, depth: 1 });
        }
    }

    #[test]
    fn singleton_subsample_is_a_leaf() {
        let data = one_dim(&[0.5, 1.5]);
        let mut rng = super::tree_rng(1, 0);
        let tree = build_tree(&data, vec![0], 4, &mut rng);
        assert_eq!(tree.nodes(), &[TreeNode::Leaf { size: 1, depth: 0 }]);
    }

    #[test]
    fn forced_pair_split_isolates_both_points() {
        let data = one_dim(&[0.0, 1.0]);
        let mut rng = super::tree_rng(2, 0);
        let tree = build_tree(&data, vec![0, 1], 1, &mut rng);
        assert_eq!(tree.nodes().len(), 3);
        assert_eq!(tree.root().size(), 2);
    }

    #[test]
    fn clamps_oversized_subsample() {
        let data = one_dim(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let model = fit(&data, &ForestConfig::new(64, 3, 0).unwrap()).unwrap();
        assert_eq!(model.config().subsample_size(), 4);
        assert_eq!(model.config().max_depth(), 2);
        assert_eq!(model.expected_depth_norm(), crate::math::expected_depth(4));
    }

    #[test]
    fn rejects_single_row_dataset() {
        let one_row = one_dim(&[1.0]);
        assert!(matches!(
            fit(&one_row, &ForestConfig::new(2, 1, 0).unwrap()),
            Err(Error::EmptyDataset)
        ));
    }

    /// Routes a subsample row down the tree by the `<=` rule, returning the
    /// reached leaf index.
    fn route(tree: &IsolationTree, data: &Dataset, row: u32) -> usize {
        let mut at = 0usize;
        loop {
            match &tree.nodes()[at] {
                TreeNode::Leaf { .. } => return at,
                TreeNode::Internal {
                    feature,
                    split,
                    left,
                    right,
                    ..
                } => {
                    at = if data.value(row as usize, *feature as usize) <= *split {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    fn check_structure(tree: &IsolationTree, data: &Dataset, max_depth: usize) {
        // each subsample point reaches exactly one leaf; recorded sizes match
        let mut leaf_counts = vec![0usize; tree.nodes().len()];
        for &row in tree.subsample_indices() {
            leaf_counts[route(tree, data, row)] += 1;
        }
        let mut depths = vec![0u32; tree.nodes().len()];
        for (i, node) in tree.nodes().iter().enumerate() {
            match node {
                TreeNode::Leaf { size, depth } => {
                    assert_eq!(*size as usize, leaf_counts[i], "leaf {i} occupancy");
                    assert_eq!(*depth, depths[i]);
                    assert!((*depth as usize) <= max_depth);
                }
                TreeNode::Internal {
                    feature,
                    split,
                    size,
                    left,
                    right,
                } => {
                    assert_eq!(
                        tree.nodes()[*left as usize].size()
                            + tree.nodes()[*right as usize].size(),
                        *size as usize
                    );
                    depths[*left as usize] = depths[i] + 1;
                    depths[*right as usize] = depths[i] + 1;
                    // split lies inside [cell min, cell max) of its occupants
                    let occupants: Vec<u32> = tree
                        .subsample_indices()
                        .iter()
                        .copied()
                        .filter(|&row| {
                            let mut at = 0usize;
                            loop {
                                if at == i {
                                    return true;
                                }
                                match &tree.nodes()[at] {
                                    TreeNode::Leaf { .. } => return false,
                                    TreeNode::Internal {
                                        feature,
                                        split,
                                        left,
                                        right,
                                        ..
                                    } => {
                                        at = if data.value(row as usize, *feature as usize)
                                            <= *split
                                        {
                                            *left as usize
                                        } else {
                                            *right as usize
                                        };
                                    }
                                }
                            }
                        })
                        .collect();
                    let (min, max) =
                        feature_span(data, &occupants, *feature as usize).expect("split exists");
                    assert!(*split >= min && *split < max, "split outside [min, max)");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn partition_and_split_validity(
            seed in 0u64..1_000,
            rows in prop::collection::vec(
                prop::collection::vec(-100.0f64..100.0, 3),
                8..40,
            ),
        ) {
            let data = Dataset::from_rows(
                vec!["a".into(), "b".into(), "c".into()],
                rows,
            ).unwrap();
            let config = ForestConfig::new(8, 5, seed).unwrap();
            let model = fit(&data, &config).unwrap();
            for tree in model.trees() {
                prop_assert_eq!(tree.subsample_indices().len(), 8);
                check_structure(tree, &data, config.max_depth());
                let leaf_total: usize = tree
                    .nodes()
                    .iter()
                    .filter_map(|n| match n {
                        TreeNode::Leaf { size, .. } => Some(*size as usize),
                        _ => None,
                    })
                    .sum();
                prop_assert_eq!(leaf_total, 8);
            }
        }

        #[test]
        fn refit_is_bit_identical(seed in 0u64..1_000) {
            let rows: Vec<Vec<f64>> = (0..30)
                .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()])
                .collect();
            let data = Dataset::from_rows(vec!["a".into(), "b".into()], rows).unwrap();
            let config = ForestConfig::new(16, 7, seed).unwrap();
            let first = fit(&data, &config).unwrap();
            let second = fit(&data, &config).unwrap();
            prop_assert_eq!(first, second);
        }
    }

    /// Independent isolation-depth simulator: isolates `points` by the same
    /// uniform-split rule without building any tree machinery.
    fn simulated_mean_isolation_depth<R: Rng>(points: &[f64], rng: &mut R) -> f64 {
        fn recurse<R: Rng>(points: &[f64], depth: usize, total: &mut f64, rng: &mut R) {
            if points.len() <= 1 {
                *total += (points.len() * depth) as f64;
                return;
            }
            let min = points.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = points.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if min == max {
                *total += (points.len() * depth) as f64;
                return;
            }
            let split = rng.random_range(min..max);
            let left: Vec<f64> = points.iter().copied().filter(|p| *p <= split).collect();
            let right: Vec<f64> = points.iter().copied().filter(|p| *p > split).collect();
            recurse(&left, depth + 1, total, rng);
            recurse(&right, depth + 1, total, rng);
        }
        let mut total = 0.0;
        recurse(points, 0, &mut total, rng);
        total / points.len() as f64
    }

    #[test]
    fn mean_depth_tracks_partition_simulator() {
        // ensemble under test
        let data = one_dim(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let config = ForestConfig::new(8, 200, 42).unwrap();
        let model = fit(&data, &config).unwrap();
        let table = model.depth_table();
        let mut raw_mean = 0.0;
        let mut extended_mean = 0.0;
        for tree in model.trees() {
            let mut raw = 0.0;
            let mut extended = 0.0;
            for node in tree.nodes() {
                if let TreeNode::Leaf { size, depth } = node {
                    raw += f64::from(*size) * f64::from(*depth);
                    extended +=
                        f64::from(*size) * (f64::from(*depth) + table.get(*size as usize));
                }
            }
            raw_mean += raw / 8.0;
            extended_mean += extended / 8.0;
        }
        raw_mean /= model.trees().len() as f64;
        extended_mean /= model.trees().len() as f64;

        // oracle: 1e5 independent simulations of isolating 8 uniform points
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut oracle = 0.0;
        for _ in 0..100_000 {
            let points: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            oracle += simulated_mean_isolation_depth(&points, &mut rng);
        }
        oracle /= 100_000.0;

        assert!((oracle - crate::math::expected_depth(8)).abs() < 0.5);
        assert!((1.0..=3.0).contains(&raw_mean), "raw mean {raw_mean}");
        assert!(
            (extended_mean - oracle).abs() < 1.0,
            "extended mean {extended_mean} vs oracle {oracle}"
        );
    }
}
