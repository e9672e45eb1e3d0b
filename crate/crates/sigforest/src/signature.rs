//! Per-feature anomaly signatures.
//!
//! Every traversed split contributes `delta = 1 - E[d(parent)] + E[d(child)]`
//! to a sample's expected isolation depth; summed along a path these deltas
//! telescope, so `E[d(n)] + sum(delta)` reproduces `leaf_depth +
//! E[d(leaf_size)]` exactly. Averaging the deltas per split feature across
//! all trees yields the signature vector: strongly negative entries mark the
//! features that isolated the sample, positive entries mark features whose
//! splits barely shrank its cell.

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::forest::{ForestModel, IsolationTree, TreeNode};
use crate::math::ExpectedDepthTable;
use crate::scoring::{check_dimension, route_to_leaf, SplitRecord};

/// Per-feature averaged signature of one sample.
///
/// `values[f]` is the mean depth contribution of feature `f` over the
/// `counts[f]` splits that used it; features never selected along any of the
/// sample's paths keep `values[f] = 0` with `defined_mask[f] = false` so an
/// undefined average is never mistaken for a true zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureVector {
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub defined_mask: Vec<bool>,
}

/// Signature rows for a whole dataset, aligned with its row order.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureMatrix {
    pub rows: Vec<SignatureVector>,
    pub n_features: usize,
}

impl SignatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Depth contribution of one split: `1 - E[d(parent)] + E[d(child)]`.
///
/// An isolating split of a large cell is strongly negative; a split that
/// removes nothing contributes exactly `+1`.
pub fn delta_signature(record: &SplitRecord, depths: &ExpectedDepthTable) -> f64 {
    1.0 - depths.get(record.parent_size) + depths.get(record.child_size)
}

/// Walks one tree accumulating per-feature delta sums and counts. The
/// arithmetic matches [`delta_signature`] applied to the recorded trace,
/// without materializing it.
fn accumulate_tree(
    tree: &IsolationTree,
    x: &[f64],
    depths: &ExpectedDepthTable,
    sums: &mut [f64],
    counts: &mut [usize],
) {
    let mut at = 0usize;
    loop {
        match &tree.nodes()[at] {
            TreeNode::Leaf { .. } => return,
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
                let child_size = tree.nodes()[child].size();
                let delta = 1.0 - depths.get(*size as usize) + depths.get(child_size);
                sums[*feature as usize] += delta;
                counts[*feature as usize] += 1;
                at = child;
            }
        }
    }
}

fn signature_row(model: &ForestModel, x: &[f64]) -> SignatureVector {
    let d = model.n_features();
    let depths = model.depth_table();
    let mut sums = vec![0.0; d];
    let mut counts = vec![0usize; d];
    for tree in model.trees() {
        accumulate_tree(tree, x, depths, &mut sums, &mut counts);
    }
    let mut values = vec![0.0; d];
    let mut defined_mask = vec![false; d];
    for f in 0..d {
        if counts[f] > 0 {
            values[f] = sums[f] / counts[f] as f64;
            defined_mask[f] = true;
        }
    }
    SignatureVector {
        values,
        counts,
        defined_mask,
    }
}

/// Signature of a single query point: one pooled mean per feature over the
/// concatenation of all trees' paths.
pub fn signature(model: &ForestModel, x: &[f64]) -> Result<SignatureVector> {
    check_dimension(model.n_features(), x)?;
    Ok(signature_row(model, x))
}

/// Signatures for every dataset row; row-wise identical to scalar calls.
pub fn signature_batch(model: &ForestModel, data: &Dataset) -> Result<SignatureMatrix> {
    if data.n_features() != model.n_features() {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            actual: data.n_features(),
        });
    }
    let rows = exec::map_indexed(data.n_rows(), |i| signature_row(model, data.row(i)));
    Ok(SignatureMatrix {
        rows,
        n_features: model.n_features(),
    })
}

/// Per-tree `E[d(n)] + sum of path deltas`. Equals the traversal's
/// `leaf_depth + E[d(leaf_size)]` up to float associativity; exposed so the
/// identity can be checked directly.
pub fn reconstruct_depth(model: &ForestModel, x: &[f64]) -> Result<Vec<f64>> {
    check_dimension(model.n_features(), x)?;
    let depths = model.depth_table();
    let norm = model.expected_depth_norm();
    Ok(model
        .trees()
        .iter()
        .map(|tree| {
            let mut total = norm;
            let mut at = 0usize;
            loop {
                match &tree.nodes()[at] {
                    TreeNode::Leaf { .. } => return total,
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
                        let child_size = tree.nodes()[child].size();
                        total += 1.0 - depths.get(*size as usize) + depths.get(child_size);
                        at = child;
                    }
                }
            }
        })
        .collect())
}

/// Checks the depth identity for every row of `data` against every tree.
pub fn verify_depth_identity(model: &ForestModel, data: &Dataset, tolerance: f64) -> Result<()> {
    if data.n_features() != model.n_features() {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            actual: data.n_features(),
        });
    }
    let table = model.depth_table();
    for i in 0..data.n_rows() {
        let x = data.row(i);
        let reconstructed = reconstruct_depth(model, x)?;
        for (t, tree) in model.trees().iter().enumerate() {
            let (depth, size) = route_to_leaf(tree, x);
            let direct = depth as f64 + table.get(size);
            let gap = (reconstructed[t] - direct).abs();
            if gap > tolerance {
                return Err(Error::InvariantViolation(format!(
                    "depth identity off by {gap:e} for row {:?} in tree {t}",
                    data.row_id(i)
                )));
            }
        }
    }
    Ok(())
}
