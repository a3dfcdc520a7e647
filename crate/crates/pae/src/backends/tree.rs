//! CART-style decision tree: greedy binary splits minimizing Gini impurity,
//! thresholds at midpoints of sorted unique feature values, class-frequency
//! leaves. A sample goes left when `x[feature] < threshold`.

use serde::{Deserialize, Serialize};

use super::{argmax_lowest, BackendError, Classifier};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        /// Class frequencies at the leaf (a simplex).
        dist: Vec<f64>,
        n: u64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeModel {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
    pub root: TreeNode,
}

impl TreeModel {
    pub fn depth(&self) -> usize {
        self.root.depth()
    }
}

fn gini(counts: &[u64], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            p * p
        })
        .sum::<f64>()
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    weighted_impurity: f64,
}

#[allow(clippy::needless_range_loop)] // the feature index names the split
fn best_split(
    rows: &[Vec<f64>],
    labels: &[usize],
    ids: &[usize],
    n_classes: usize,
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = ids.len();
    let dim = rows[0].len();
    let mut best: Option<SplitChoice> = None;

    for feature in 0..dim {
        let mut order: Vec<usize> = ids.to_vec();
        order.sort_by(|&a, &b| rows[a][feature].partial_cmp(&rows[b][feature]).unwrap());

        let mut left_counts = vec![0u64; n_classes];
        let mut right_counts = vec![0u64; n_classes];
        for &i in &order {
            right_counts[labels[i]] += 1;
        }

        for pos in 1..n {
            let prev = order[pos - 1];
            left_counts[labels[prev]] += 1;
            right_counts[labels[prev]] -= 1;
            let (a, b) = (rows[prev][feature], rows[order[pos]][feature]);
            if a == b {
                continue; // no boundary between equal values
            }
            if pos < min_leaf || n - pos < min_leaf {
                continue;
            }
            let threshold = (a + b) / 2.0;
            let weighted = (pos as f64 * gini(&left_counts, pos as u64)
                + (n - pos) as f64 * gini(&right_counts, (n - pos) as u64))
                / n as f64;
            // Strict improvement keeps the lowest feature index and lowest
            // threshold on ties.
            if best.as_ref().is_none_or(|b| weighted < b.weighted_impurity) {
                best = Some(SplitChoice {
                    feature,
                    threshold,
                    weighted_impurity: weighted,
                });
            }
        }
    }
    best
}

fn grow(
    rows: &[Vec<f64>],
    labels: &[usize],
    ids: &[usize],
    n_classes: usize,
    depth_left: usize,
    min_leaf: usize,
) -> TreeNode {
    let mut counts = vec![0u64; n_classes];
    for &i in ids {
        counts[labels[i]] += 1;
    }
    let total = ids.len() as u64;
    let node_impurity = gini(&counts, total);
    let leaf = || TreeNode::Leaf {
        dist: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        n: total,
    };

    if depth_left == 0 || node_impurity == 0.0 || ids.len() < 2 * min_leaf {
        return leaf();
    }
    // Zero-gain splits are allowed on impure nodes; a deeper split may still
    // purify the children (the XOR pattern).
    let split = match best_split(rows, labels, ids, n_classes, min_leaf) {
        Some(s) => s,
        None => return leaf(),
    };
    let (left_ids, right_ids): (Vec<usize>, Vec<usize>) = ids
        .iter()
        .partition(|&&i| rows[i][split.feature] < split.threshold);
    TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(grow(
            rows,
            labels,
            &left_ids,
            n_classes,
            depth_left - 1,
            min_leaf,
        )),
        right: Box::new(grow(
            rows,
            labels,
            &right_ids,
            n_classes,
            depth_left - 1,
            min_leaf,
        )),
    }
}

/// Greedy CART fit. The search is exhaustive and deterministic; the seed is
/// recorded for manifest parity with the other back-ends.
pub fn tree_fit(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    max_depth: usize,
    min_leaf: usize,
    seed: u64,
) -> Result<TreeModel, BackendError> {
    assert!(max_depth >= 1, "max_depth must be at least 1");
    assert!(min_leaf >= 1, "min_leaf must be at least 1");
    if rows.is_empty() {
        return Err(BackendError::EmptyData);
    }
    if rows.len() != labels.len() {
        return Err(BackendError::LengthMismatch(rows.len(), labels.len()));
    }
    let dim = rows[0].len();
    for row in rows {
        if row.len() != dim {
            return Err(BackendError::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
    }
    for &label in labels {
        if label >= n_classes {
            return Err(BackendError::ClassOutOfRange {
                got: label,
                classes: n_classes,
            });
        }
    }
    let ids: Vec<usize> = (0..rows.len()).collect();
    let root = grow(rows, labels, &ids, n_classes, max_depth, min_leaf);
    Ok(TreeModel {
        n_classes,
        feature_dim: dim,
        max_depth,
        min_leaf,
        seed,
        root,
    })
}

/// Predicted class (argmax of the leaf distribution, lowest index on ties)
/// together with the leaf distribution itself.
pub fn tree_predict<'a>(model: &'a TreeModel, x: &[f64]) -> (usize, &'a [f64]) {
    let mut node = &model.root;
    loop {
        match node {
            TreeNode::Leaf { dist, .. } => return (argmax_lowest(dist), dist),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                node = if x[*feature] < *threshold { left } else { right };
            }
        }
    }
}

impl Classifier for TreeModel {
    fn num_classes(&self) -> usize {
        self.n_classes
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Leaf class probabilities.
    fn scores(&self, x: &[f64]) -> Result<Vec<f64>, BackendError> {
        if x.len() != self.feature_dim {
            return Err(BackendError::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        Ok(tree_predict(self, x).1.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accuracy(model: &TreeModel, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = rows
            .iter()
            .zip(labels)
            .filter(|(x, &y)| tree_predict(model, x).0 == y)
            .count();
        hits as f64 / rows.len() as f64
    }

    #[test]
    fn pure_data_yields_depth_zero_tree() {
        let rows = vec![vec![1.0], vec![2.0], vec![3.0]];
        let model = tree_fit(&rows, &[1, 1, 1], 2, 5, 1, 0).unwrap();
        assert_eq!(model.depth(), 0);
        assert_eq!(tree_predict(&model, &[9.0]).0, 1);
    }

    #[test]
    fn one_dimensional_threshold_recovers_the_boundary() {
        // Class 0 below zero, class 1 above; exhaustive split-point oracle
        // says the best stump must sit strictly between -0.2 and 0.3.
        let rows: Vec<Vec<f64>> = [-2.0, -1.4, -0.7, -0.2, 0.3, 0.9, 1.5, 2.2]
            .iter()
            .map(|&v| vec![v])
            .collect();
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let model = tree_fit(&rows, &labels, 2, 5, 1, 0).unwrap();
        assert_eq!(model.depth(), 1);
        match &model.root {
            TreeNode::Split { threshold, .. } => {
                assert!(*threshold > -0.2 && *threshold < 0.3);
                assert_eq!(*threshold, (-0.2 + 0.3) / 2.0);
            }
            _ => panic!("expected a split"),
        }
        assert_eq!(accuracy(&model, &rows, &labels), 1.0);
    }

    #[test]
    fn depth_one_cannot_solve_xor() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
        ];
        let labels = vec![0, 1, 1, 0];
        let model = tree_fit(&rows, &labels, 2, 1, 1, 0).unwrap();
        let acc = accuracy(&model, &rows, &labels);

        // Oracle: enumerate every stump (feature, midpoint threshold) and
        // every labeling of its two sides.
        let mut best_possible: f64 = 0.5;
        for feature in 0..2 {
            for threshold in [0.5] {
                for (l, r) in [(0, 1), (1, 0)] {
                    let hits = rows
                        .iter()
                        .zip(&labels)
                        .filter(|(x, &y)| {
                            let pred = if x[feature] < threshold { l } else { r };
                            pred == y
                        })
                        .count();
                    best_possible = best_possible.max(hits as f64 / 4.0);
                }
            }
        }
        assert!(best_possible <= 0.75);
        assert!(acc <= best_possible);

        // Depth 2 solves it.
        let deep = tree_fit(&rows, &labels, 2, 2, 1, 0).unwrap();
        assert_eq!(accuracy(&deep, &rows, &labels), 1.0);
    }

    #[test]
    fn max_depth_is_respected() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(1, "tree-depth", 0);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        for depth in [1, 2, 3, 5] {
            let model = tree_fit(&rows, &labels, 3, depth, 1, 0).unwrap();
            assert!(model.depth() <= depth);
        }
    }

    #[test]
    fn min_leaf_is_respected() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let model = tree_fit(&rows, &labels, 2, 8, 4, 0).unwrap();
        fn check(node: &TreeNode, min_leaf: u64) {
            match node {
                TreeNode::Leaf { n, .. } => assert!(*n >= min_leaf),
                TreeNode::Split { left, right, .. } => {
                    check(left, min_leaf);
                    check(right, min_leaf);
                }
            }
        }
        check(&model.root, 4);
    }

    // Threshold semantics: predictions at the training points are invariant
    // to strictly monotone transforms of a feature, checked against a fresh
    // retrain on the transformed data. (Interior test points may cross the
    // midpoint after a nonlinear transform, so the check runs on training
    // values.)
    #[test]
    fn monotone_transform_invariance_at_training_points() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(2, "tree-mono", 0);
        for trial in 0..10 {
            let n = 40;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(0.1..4.0), rng.gen_range(-2.0..2.0)])
                .collect();
            let labels: Vec<usize> = rows
                .iter()
                .map(|r| if r[0] * 0.8 + r[1] > 0.5 { 1 } else { 0 })
                .collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let base = tree_fit(&rows, &labels, 2, 3, 1, 0).unwrap();

            // Strictly increasing transform of feature 0.
            let transform = |v: f64| match trial % 3 {
                0 => v.ln(),
                1 => v * v,
                _ => 3.0 * v + 1.0,
            };
            let rows_t: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![transform(r[0]), r[1]])
                .collect();
            let retrained = tree_fit(&rows_t, &labels, 2, 3, 1, 0).unwrap();
            for (orig, trans) in rows.iter().zip(&rows_t) {
                assert_eq!(
                    tree_predict(&base, orig).0,
                    tree_predict(&retrained, trans).0
                );
            }
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        assert!(matches!(
            tree_fit(&[], &[], 2, 5, 1, 0),
            Err(BackendError::EmptyData)
        ));
    }
}
