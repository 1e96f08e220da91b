use serde::{Deserialize, Serialize};

use super::SurrogateError;
use crate::cluster::ClusterAssignment;
use crate::featurize::{FeatureKind, FeatureMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    #[default]
    None,
    /// Each class weighted by `n / (k * n_class)`.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeOptions {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub class_weight: ClassWeight,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self {
            max_depth: 3,
            min_leaf: 1,
            class_weight: ClassWeight::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFeature {
    pub feature_id: String,
    pub display_name: String,
    /// Presence/absence feature, split at 0.5.
    pub binary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// Index into the tree's feature list.
    pub feature: usize,
    pub feature_id: String,
    /// Rows with value `<= threshold` go left.
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub impurity_decrease: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub depth: usize,
    pub samples: usize,
    /// Aligned with the tree's class list.
    pub class_counts: Vec<usize>,
    pub prediction: u32,
    pub gini: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub classes: Vec<u32>,
    pub features: Vec<TreeFeature>,
    pub nodes: Vec<TreeNode>,
    pub options: TreeOptions,
}

/// Training rows, row-major, with zero-based class indices.
pub(crate) struct Dataset<'a> {
    pub x: &'a [f64],
    pub width: usize,
    pub y: &'a [usize],
}

impl Dataset<'_> {
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.x[row * self.width + feature]
    }
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total) * (c / total)).sum::<f64>()
}

struct Builder<'a> {
    data: &'a Dataset<'a>,
    weights: Vec<f64>,
    classes: &'a [u32],
    /// Feature indices in ascending feature_id order.
    order: Vec<usize>,
    features: &'a [TreeFeature],
    options: &'a TreeOptions,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn weighted(&self, idx: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let k = self.classes.len();
        let mut counts = vec![0usize; k];
        let mut w = vec![0.0; k];
        for &i in idx {
            counts[self.data.y[i]] += 1;
            w[self.data.y[i]] += self.weights[self.data.y[i]];
        }
        (counts, w)
    }

    fn best_split(&self, idx: &[usize], parent: &[f64]) -> Option<(usize, f64, f64)> {
        let k = self.classes.len();
        let total: f64 = parent.iter().sum();
        let parent_gini = gini(parent, total);
        let min_leaf = self.options.min_leaf.max(1);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
        for &f in &self.order {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.data.value(i, f), self.data.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[pairs.len() - 1].0 {
                continue;
            }
            let mut left = vec![0.0; k];
            for pos in 0..pairs.len() - 1 {
                let (v, c) = pairs[pos];
                left[c] += self.weights[c];
                let next = pairs[pos + 1].0;
                if next == v || pos + 1 < min_leaf || pairs.len() - pos - 1 < min_leaf {
                    continue;
                }
                let wl: f64 = left.iter().sum();
                let right: Vec<f64> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
                let wr = total - wl;
                let child = (wl * gini(&left, wl) + wr * gini(&right, wr)) / total;
                let decrease = parent_gini - child;
                if decrease > 1e-12 && best.is_none_or(|(_, _, d)| decrease > d + 1e-12) {
                    let mut threshold = (v + next) / 2.0;
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some((f, threshold, decrease));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let (counts, w) = self.weighted(&idx);
        let total: f64 = w.iter().sum();
        let mut arg = 0;
        for c in 1..w.len() {
            if w[c] > w[arg] {
                arg = c;
            }
        }
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            depth,
            samples: idx.len(),
            class_counts: counts.clone(),
            prediction: self.classes[arg],
            gini: gini(&w, total),
            split: None,
        });
        let pure = counts.iter().filter(|c| **c > 0).count() <= 1;
        if pure || depth >= self.options.max_depth || idx.len() < 2 * self.options.min_leaf.max(1) {
            return id;
        }
        let Some((f, threshold, decrease)) = self.best_split(&idx, &w) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.data.value(i, f) <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id].split = Some(Split {
            feature: f,
            feature_id: self.features[f].feature_id.clone(),
            threshold,
            left,
            right,
            impurity_decrease: decrease,
        });
        id
    }
}

pub(crate) fn fit(data: &Dataset, classes: &[u32], features: &[TreeFeature], options: &TreeOptions) -> DecisionTree {
    let k = classes.len();
    let weights = match options.class_weight {
        ClassWeight::None => vec![1.0; k],
        ClassWeight::Balanced => {
            let mut n = vec![0usize; k];
            for &c in data.y {
                n[c] += 1;
            }
            n.iter()
                .map(|&c| {
                    if c == 0 {
                        0.0
                    } else {
                        data.y.len() as f64 / (k as f64 * c as f64)
                    }
                })
                .collect()
        }
    };
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| features[a].feature_id.cmp(&features[b].feature_id));
    let mut b = Builder {
        data,
        weights,
        classes,
        order,
        features,
        options,
        nodes: Vec::new(),
    };
    b.grow((0..data.y.len()).collect(), 0);
    DecisionTree {
        classes: classes.to_vec(),
        features: features.to_vec(),
        nodes: b.nodes,
        options: options.clone(),
    }
}

impl DecisionTree {
    /// Label for a row aligned with `self.features`; NaN counts as 0.
    pub fn predict(&self, row: &[f64]) -> u32 {
        self.nodes[self.leaf(row)].prediction
    }

    /// Index of the leaf the row ends in.
    pub fn leaf(&self, row: &[f64]) -> usize {
        let mut n = 0;
        while let Some(s) = &self.nodes[n].split {
            let v = row.get(s.feature).copied().filter(|v| !v.is_nan()).unwrap_or(0.0);
            n = if v <= s.threshold { s.left } else { s.right };
        }
        n
    }

    /// Aligns a matrix row with the tree's features; absent columns read 0.
    pub fn align(&self, matrix: &FeatureMatrix) -> Vec<Option<usize>> {
        self.features
            .iter()
            .map(|f| matrix.column_index(&f.feature_id))
            .collect()
    }

    pub fn predict_matrix_row(&self, matrix: &FeatureMatrix, columns: &[Option<usize>], row: usize) -> u32 {
        let values: Vec<f64> = columns
            .iter()
            .map(|c| {
                c.map_or(0.0, |c| {
                    if matrix.is_missing(row, c) {
                        0.0
                    } else {
                        matrix.get(row, c)
                    }
                })
            })
            .collect();
        self.predict(&values)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (usize, &TreeNode)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.split.is_none())
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Feature ids used by at least one split.
    pub fn used_features(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| n.split.as_ref().map(|s| s.feature_id.clone()))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

pub(crate) fn tree_features(matrix: &FeatureMatrix) -> Vec<TreeFeature> {
    matrix
        .features()
        .iter()
        .map(|f| TreeFeature {
            feature_id: f.feature_id.clone(),
            display_name: f.display_name.clone(),
            binary: matches!(f.kind, FeatureKind::Binary | FeatureKind::Quantised),
        })
        .collect()
}

/// Rows of clustered patients (in patient order) and their labels.
pub(crate) struct Training {
    pub rows: Vec<usize>,
    pub x: Vec<f64>,
    pub labels: Vec<u32>,
}

pub(crate) fn training_rows(
    matrix: &FeatureMatrix,
    assignment: &ClusterAssignment,
) -> Result<Training, SurrogateError> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (p, l) in &assignment.labels {
        if let Some(c) = l.cluster() {
            rows.push(
                matrix
                    .row_index(p)
                    .ok_or_else(|| SurrogateError::MissingPatient(p.to_string()))?,
            );
            labels.push(c);
        }
    }
    let width = matrix.ncols();
    let mut x = Vec::with_capacity(rows.len() * width);
    for &r in &rows {
        x.extend((0..width).map(|c| if matrix.is_missing(r, c) { 0.0 } else { matrix.get(r, c) }));
    }
    Ok(Training { rows, x, labels })
}

/// Class list and zero-based class indices; errors on a single label.
pub(crate) fn encode_labels(labels: &[u32]) -> Result<(Vec<u32>, Vec<usize>), SurrogateError> {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(SurrogateError::NothingToExplain);
    }
    let y = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label listed"))
        .collect();
    Ok((classes, y))
}

/// Multi-class tree predicting cluster labels from the matrix features.
/// Unclustered patients are left out.
pub fn train_tree(
    matrix: &FeatureMatrix,
    assignment: &ClusterAssignment,
    options: &TreeOptions,
) -> Result<DecisionTree, SurrogateError> {
    let t = training_rows(matrix, assignment)?;
    let (classes, y) = encode_labels(&t.labels)?;
    let features = tree_features(matrix);
    let data = Dataset {
        x: &t.x,
        width: features.len(),
        y: &y,
    };
    Ok(fit(&data, &classes, &features, options))
}

/// Label used for "everyone else" in one-vs-rest trees.
pub const REST: u32 = 0;

/// Binary tree separating one cluster (its label) from the rest (label 0).
pub fn train_one_vs_rest(
    matrix: &FeatureMatrix,
    assignment: &ClusterAssignment,
    cluster: u32,
    options: &TreeOptions,
) -> Result<DecisionTree, SurrogateError> {
    let t = training_rows(matrix, assignment)?;
    let labels: Vec<u32> = t
        .labels
        .iter()
        .map(|l| if *l == cluster { cluster } else { REST })
        .collect();
    let (classes, y) = encode_labels(&labels)?;
    let features = tree_features(matrix);
    let data = Dataset {
        x: &t.x,
        width: features.len(),
        y: &y,
    };
    Ok(fit(&data, &classes, &features, options))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feats(n: usize) -> Vec<TreeFeature> {
        (0..n)
            .map(|i| TreeFeature {
                feature_id: format!("f{i}"),
                display_name: format!("F{i}"),
                binary: true,
            })
            .collect()
    }

    fn accuracy(tree: &DecisionTree, x: &[f64], width: usize, y: &[usize]) -> f64 {
        let hits = y
            .iter()
            .enumerate()
            .filter(|(i, c)| tree.predict(&x[i * width..(i + 1) * width]) == tree.classes[**c])
            .count();
        hits as f64 / y.len() as f64
    }

    #[test]
    fn one_feature_separates() {
        let x = [0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let y = [0, 0, 0, 0, 1, 1, 1, 1];
        // feature 0 is noise, feature 1 decides
        let xs: Vec<f64> = (0..4)
            .flat_map(|i| [x[i], 0.0])
            .chain((4..8).flat_map(|i| [x[i], 1.0]))
            .collect();
        let tree = fit(
            &Dataset {
                x: &xs,
                width: 2,
                y: &y,
            },
            &[1, 2],
            &feats(2),
            &TreeOptions::default(),
        );
        assert_eq!(tree.depth(), 1);
        let s = tree.nodes[0].split.as_ref().unwrap();
        assert_eq!((s.feature_id.as_str(), s.threshold), ("f1", 0.5));
        assert_eq!(accuracy(&tree, &xs, 2, &y), 1.0);
        assert_eq!(tree.predict(&[0.0, 0.0]), 1);
    }

    #[test]
    fn xor_needs_both_features() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for rep in 0..3 {
            for (a, b) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                // unequal multiplicities so the root split has a positive gain
                let copies = if a == 1.0 && b == 1.0 { 2 } else { 1 } + rep % 2;
                for _ in 0..copies {
                    x.extend([a, b]);
                    y.push(usize::from(a != b));
                }
            }
        }
        let tree = fit(
            &Dataset { x: &x, width: 2, y: &y },
            &[1, 2],
            &feats(2),
            &TreeOptions {
                max_depth: 2,
                ..TreeOptions::default()
            },
        );
        assert_eq!(accuracy(&tree, &x, 2, &y), 1.0);
        assert_eq!(tree.used_features(), vec!["f0", "f1"]);
    }

    #[test]
    fn equal_gains_pick_lowest_feature_id() {
        let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let y = [0, 0, 1, 1];
        let mut f = feats(2);
        f.swap(0, 1); // column 0 is named f1, column 1 is f0
        let tree = fit(
            &Dataset { x: &x, width: 2, y: &y },
            &[1, 2],
            &f,
            &TreeOptions::default(),
        );
        assert_eq!(tree.nodes[0].split.as_ref().unwrap().feature_id, "f0");
    }

    #[test]
    fn continuous_threshold_is_midpoint() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y = [0, 0, 1, 1];
        let tree = fit(
            &Dataset { x: &x, width: 1, y: &y },
            &[3, 7],
            &feats(1),
            &TreeOptions::default(),
        );
        assert_eq!(tree.nodes[0].split.as_ref().unwrap().threshold, 3.0);
        assert_eq!(tree.predict(&[f64::NAN]), 3);
    }

    proptest! {
        #[test]
        fn structural_invariants(seed in any::<u64>(), depth in 1usize..5, min_leaf in 1usize..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let x: Vec<f64> = (0..n * 4).map(|_| f64::from(rng.random_range(0..3u8))).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let opts = TreeOptions { max_depth: depth, min_leaf, ..TreeOptions::default() };
            let tree = fit(&Dataset { x: &x, width: 4, y: &y }, &[1, 2, 3], &feats(4), &opts);
            prop_assert!(tree.depth() <= depth);
            for node in &tree.nodes {
                prop_assert_eq!(node.class_counts.iter().sum::<usize>(), node.samples);
                prop_assert!(node.samples >= min_leaf);
                if let Some(s) = &node.split {
                    prop_assert!(s.impurity_decrease > 0.0);
                    prop_assert_eq!(tree.nodes[s.left].samples + tree.nodes[s.right].samples, node.samples);
                }
            }
            // replaying training rows lands each in a leaf whose prediction is its argmax
            for i in 0..n {
                let leaf = &tree.nodes[tree.leaf(&x[i * 4..(i + 1) * 4])];
                let max = *leaf.class_counts.iter().max().unwrap();
                let first = leaf.class_counts.iter().position(|c| *c == max).unwrap();
                prop_assert_eq!(leaf.prediction, tree.classes[first]);
            }
            let again = fit(&Dataset { x: &x, width: 4, y: &y }, &[1, 2, 3], &feats(4), &opts);
            prop_assert_eq!(tree, again);
        }

        #[test]
        fn labels_from_few_binary_features_are_learned(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 80;
            let x: Vec<f64> = (0..n * 5).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            // label is a function of features 1 and 3
            let y: Vec<usize> = (0..n).map(|i| (x[i * 5 + 1] as usize) * 2 + x[i * 5 + 3] as usize).collect();
            let mut classes: Vec<usize> = y.clone();
            classes.sort_unstable();
            classes.dedup();
            let remap: Vec<usize> = y.iter().map(|c| classes.binary_search(c).unwrap()).collect();
            let labels: Vec<u32> = (1..=classes.len() as u32).collect();
            if labels.len() < 2 {
                return Ok(());
            }
            let tree = fit(&Dataset { x: &x, width: 5, y: &remap }, &labels, &feats(5), &TreeOptions { max_depth: 2, ..TreeOptions::default() });
            prop_assert_eq!(accuracy(&tree, &x, 5, &remap), 1.0);
        }
    }
}
