//! Tree traversal and the ensemble anomaly score.
//!
//! A query descends every tree by the `<=`/`>` routing rule. The depth it
//! reaches, extended by the expected depth of the leaf it lands in, averages
//! into `-2^(-mean / E[d(n)])`: scores live in `(-1, 0)` and anomalies sit
//! near `-1`.

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::forest::{ForestModel, IsolationTree, TreeNode};
use crate::math::ExpectedDepthTable;

/// One traversed edge: which feature split the cell and the training
/// occupancies of the mother cell and the child the query entered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRecord {
    pub feature_index: usize,
    pub parent_size: usize,
    pub child_size: usize,
}

/// Root-to-leaf record of a traversal. Occupancies are the stored training
/// counts, whether or not the query was in the tree's subsample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathTrace {
    pub records: Vec<SplitRecord>,
    pub leaf_size: usize,
    pub leaf_depth: usize,
}

/// Per-sample scoring outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    /// Mean of `leaf_depth + E[d(leaf_size)]` over all trees.
    pub expected_depth_mean: f64,
    /// `-2^(-expected_depth_mean / E[d(n)])`; lower is more anomalous.
    pub score: f64,
}

/// Walks `x` down one tree, recording every traversed split.
pub fn trace_path(tree: &IsolationTree, x: &[f64]) -> Result<PathTrace> {
    check_dimension(tree.n_features(), x)?;
    let mut records = Vec::new();
    let mut at = 0usize;
    loop {
        match &tree.nodes()[at] {
            TreeNode::Leaf { size, depth } => {
                debug_assert_eq!(records.len(), *depth as usize);
                return Ok(PathTrace {
                    records,
                    leaf_size: *size as usize,
                    leaf_depth: *depth as usize,
                });
            }
            TreeNode::Internal {
                feature,
                split,
                size,
                left,
                right,
            } => {
                let child = if x[*feature as usize] <= *split {
                    *left as usize
                } else {
                    *right as usize
                };
                records.push(SplitRecord {
                    feature_index: *feature as usize,
                    parent_size: *size as usize,
                    child_size: tree.nodes()[child].size(),
                });
                at = child;
            }
        }
    }
}

/// Depth the query would reach if the leaf's cell were split on: traversal
/// depth plus the expected depth of the leaf occupancy.
pub fn expected_path_depth(trace: &PathTrace, depths: &ExpectedDepthTable) -> f64 {
    trace.leaf_depth as f64 + depths.get(trace.leaf_size)
}

/// Lean traversal for scoring: leaf depth and size only, no allocation.
#[inline]
pub(crate) fn route_to_leaf(tree: &IsolationTree, x: &[f64]) -> (usize, usize) {
    let mut at = 0usize;
    loop {
        match &tree.nodes()[at] {
            TreeNode::Leaf { size, depth } => return (*depth as usize, *size as usize),
            TreeNode::Internal {
                feature,
                split,
                left,
                right,
                ..
            } => {
                at = if x[*feature as usize] <= *split {
                    *left as usize
                } else {
                    *right as usize
                };
            }
        }
    }
}

pub(crate) fn check_dimension(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: x.len(),
        });
    }
    Ok(())
}

fn score_row(model: &ForestModel, x: &[f64]) -> ScoreReport {
    let table = model.depth_table();
    let mut sum = 0.0;
    for tree in model.trees() {
        let (depth, size) = route_to_leaf(tree, x);
        sum += depth as f64 + table.get(size);
    }
    let mean = sum / model.trees().len() as f64;
    ScoreReport {
        expected_depth_mean: mean,
        score: -(-mean / model.expected_depth_norm()).exp2(),
    }
}

/// Scores a single query point.
pub fn score(model: &ForestModel, x: &[f64]) -> Result<ScoreReport> {
    check_dimension(model.n_features(), x)?;
    Ok(score_row(model, x))
}

/// Scores every dataset row. Rows are independent, so the batch equals the
/// scalar calls bit-for-bit regardless of how it is partitioned.
pub fn score_batch(model: &ForestModel, data: &Dataset) -> Result<Vec<ScoreReport>> {
    if data.n_features() != model.n_features() {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            actual: data.n_features(),
        });
    }
    Ok(exec::map_indexed(data.n_rows(), |i| {
        score_row(model, data.row(i))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{fit, ForestConfig};
    use crate::math::expected_depth;
    use proptest::prelude::*;

    fn constant_model(rows: usize, trees: usize) -> ForestModel {
        let data = Dataset::from_rows(
            vec!["a".to_string(), "b".to_string()],
            vec![vec![3.0, -1.0]; rows],
        )
        .unwrap();
        fit(&data, &ForestConfig::new(rows, trees, 5).unwrap()).unwrap()
    }

    #[test]
    fn single_leaf_tree_has_empty_trace() {
        let model = constant_model(4, 3);
        let trace = trace_path(&model.trees()[0], &[0.0, 0.0]).unwrap();
        assert_eq!(
            trace,
            PathTrace {
                records: vec![],
                leaf_size: 4,
                leaf_depth: 0
            }
        );
    }

    #[test]
    fn depth_one_tree_routing_is_forced() {
        let data = Dataset::from_rows(vec!["x".to_string()], vec![vec![0.0], vec![1.0]]).unwrap();
        let model = fit(&data, &ForestConfig::new(2, 1, 11).unwrap()).unwrap();
        let trace = trace_path(&model.trees()[0], &[-5.0]).unwrap();
        assert_eq!(trace.leaf_depth, 1);
        assert_eq!(trace.leaf_size, 1);
        assert_eq!(
            trace.records,
            vec![SplitRecord {
                feature_index: 0,
                parent_size: 2,
                child_size: 1
            }]
        );
    }

    #[test]
    fn trace_rejects_wrong_dimension() {
        let model = constant_model(4, 1);
        assert!(matches!(
            trace_path(&model.trees()[0], &[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
        assert!(score(&model, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn expected_path_depth_extends_leaf() {
        let table = crate::math::ExpectedDepthTable::up_to(32);
        let isolated = PathTrace {
            records: vec![],
            leaf_size: 1,
            leaf_depth: 3,
        };
        assert_eq!(expected_path_depth(&isolated, &table), 3.0);
        let root_pair = PathTrace {
            records: vec![],
            leaf_size: 2,
            leaf_depth: 0,
        };
        assert_eq!(expected_path_depth(&root_pair, &table), 1.0);
        let truncated = PathTrace {
            records: vec![],
            leaf_size: 17,
            leaf_depth: 10,
        };
        // oracle: direct harmonic summation
        let mut h16 = 0.0;
        for j in 1..=16u32 {
            h16 += 1.0 / f64::from(j);
        }
        assert_eq!(
            expected_path_depth(&truncated, &table),
            10.0 + (2.0 * h16 - 2.0 * 16.0 / 17.0)
        );
        assert_eq!(
            expected_path_depth(&truncated, &table),
            10.0 + expected_depth(17)
        );
    }

    #[test]
    fn mean_depth_equal_to_norm_scores_minus_half() {
        // every tree of a constant-data model is one leaf of size n, so the
        // mean expected depth is exactly E[d(n)]
        let model = constant_model(8, 20);
        let report = score(&model, &[3.0, -1.0]).unwrap();
        // the mean of 20 identical summands re-rounds, so compare to 1e-12
        assert!((report.expected_depth_mean - expected_depth(8)).abs() <= 1e-12);
        assert!((report.score - (-0.5)).abs() <= 1e-12);
    }

    #[test]
    fn score_approaches_minus_one_for_vanishing_depth() {
        // limit of -2^(-mean / norm) as the mean expected depth shrinks
        let norm = expected_depth(64);
        let mut previous = -0.5;
        for mean in [2.0, 0.5, 1e-3, 1e-9, 1e-15] {
            let s = -(-mean / norm).exp2();
            assert!(s > -1.0 && s < 0.0);
            assert!(s < previous, "score must fall toward -1 as depth shrinks");
            previous = s;
        }
        assert!((previous - (-1.0)).abs() < 1e-9);
    }

    #[test]
    fn batch_matches_scalar_bit_for_bit() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64 * 0.61).sin(), (i as f64 * 0.23).cos()])
            .collect();
        let data = Dataset::from_rows(vec!["a".into(), "b".into()], rows).unwrap();
        let model = fit(&data, &ForestConfig::new(16, 40, 77).unwrap()).unwrap();
        let batch = score_batch(&model, &data).unwrap();
        assert_eq!(batch.len(), 50);
        for (i, report) in batch.iter().enumerate() {
            let single = score(&model, data.row(i)).unwrap();
            assert_eq!(single.score.to_bits(), report.score.to_bits());
            assert_eq!(
                single.expected_depth_mean.to_bits(),
                report.expected_depth_mean.to_bits()
            );
        }
    }

    #[test]
    fn empty_batch_yields_empty_list() {
        let model = constant_model(4, 2);
        let empty = Dataset::new(
            vec!["a".to_string(), "b".to_string()],
            Vec::new(),
            Vec::new(),
        )
        .unwrap();
        assert!(score_batch(&model, &empty).unwrap().is_empty());
    }

    #[test]
    fn batch_rejects_column_mismatch() {
        let model = constant_model(4, 2);
        let narrow = Dataset::from_rows(vec!["a".to_string()], vec![vec![1.0]]).unwrap();
        assert!(matches!(
            score_batch(&model, &narrow),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn scores_stay_in_open_unit_interval(
            seed in 0u64..500,
            rows in prop::collection::vec(
                prop::collection::vec(-50.0f64..50.0, 2),
                4..40,
            ),
        ) {
            let data = Dataset::from_rows(vec!["a".into(), "b".into()], rows).unwrap();
            let model = fit(&data, &ForestConfig::new(4, 15, seed).unwrap()).unwrap();
            let reports = score_batch(&model, &data).unwrap();
            let mut sorted: Vec<(f64, f64)> = reports
                .iter()
                .map(|r| (r.score, r.expected_depth_mean))
                .collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            for window in sorted.windows(2) {
                // score order equals expected-depth order
                prop_assert!(window[0].1 <= window[1].1);
            }
            for report in &reports {
                prop_assert!(report.score > -1.0 && report.score < 0.0);
            }
        }
    }
}
