//! Random forest classifier for sparse count features.
//!
//! Trees are grown on bootstrap samples with per-node uniform column
//! sampling; splits maximize the class-weighted impurity decrease with
//! thresholds placed at midpoints between adjacent distinct values (zeros
//! included implicitly, so the scan never materializes the sparse column).
//! Class weights are inverse-frequency, computed on each tree's bootstrap
//! sample. Feature importances accumulate the weighted impurity decrease per
//! column, normalized per tree and averaged.
//!
//! Training is bit-deterministic: a root seed derives one stream per tree,
//! and aggregation order is fixed, so results do not depend on the worker
//! count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jobs;
use crate::matrix::{CscView, SparseMatrix};
use crate::rng::{derive_seed, rng_from, stream, ChaCha8Rng};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("impurity of an empty node is undefined")]
    EmptyNode,
    #[error("training needs at least one row")]
    EmptyTraining,
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(u32, usize),
    #[error("matrix columns do not match the model's training vocabulary: {0}")]
    VocabularyMismatch(String),
    #[error("model file is invalid: {0}")]
    BadModelFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Gini,
    Entropy,
}

/// Impurity of a node from weighted class counts: 1 - sum p^2.
pub fn gini_impurity(class_counts: &[f64]) -> Result<f64, ForestError> {
    let total: f64 = class_counts.iter().sum();
    if total <= 0.0 {
        return Err(ForestError::EmptyNode);
    }
    let mut acc = 0.0;
    for &c in class_counts {
        let p = c / total;
        acc += p * p;
    }
    Ok(1.0 - acc)
}

/// Shannon entropy of a node in bits: -sum p log2 p.
pub fn entropy_impurity(class_counts: &[f64]) -> Result<f64, ForestError> {
    let total: f64 = class_counts.iter().sum();
    if total <= 0.0 {
        return Err(ForestError::EmptyNode);
    }
    let mut acc = 0.0;
    for &c in class_counts {
        if c > 0.0 {
            let p = c / total;
            acc -= p * p.log2();
        }
    }
    Ok(acc)
}

fn impurity(criterion: Criterion, counts: &[f64]) -> f64 {
    match criterion {
        Criterion::Gini => gini_impurity(counts).unwrap_or(0.0),
        Criterion::Entropy => entropy_impurity(counts).unwrap_or(0.0),
    }
}

/// Training configuration for one forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub n_trees: usize,
    /// Candidate columns per node = ceil(multiplier * sqrt(n_columns)).
    pub max_features_multiplier: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub criterion: Criterion,
    pub seed: u64,
}

impl HyperParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn max_features(&self, n_cols: usize) -> usize {
        let m = (self.max_features_multiplier * (n_cols as f64).sqrt()).ceil() as usize;
        m.clamp(1, n_cols.max(1))
    }
}

impl Default for HyperParams {
    /// Median of the tuning grid; the fixed configuration used where no
    /// search is requested.
    fn default() -> Self {
        Self {
            n_trees: 300,
            max_features_multiplier: 1.0,
            max_depth: 7,
            min_samples_leaf: 5,
            criterion: Criterion::Gini,
            seed: 0,
        }
    }
}

/// Hyperparameter search space in a fixed canonical order (ties in grid
/// search resolve to the earliest combination).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperGrid {
    pub n_trees: Vec<usize>,
    pub max_features_multiplier: Vec<f64>,
    pub max_depth: Vec<usize>,
    pub criterion: Vec<Criterion>,
    pub min_samples_leaf: usize,
}

impl HyperGrid {
    /// The standard tuning grid: {150, 300, 600} trees, {1/2, 1, 2} x
    /// sqrt(N) candidate features, depth {5, 7, 15}, leaf minimum 5, both
    /// impurity criteria.
    pub fn paper() -> Self {
        Self {
            n_trees: vec![150, 300, 600],
            max_features_multiplier: vec![0.5, 1.0, 2.0],
            max_depth: vec![5, 7, 15],
            criterion: vec![Criterion::Entropy, Criterion::Gini],
            min_samples_leaf: 5,
        }
    }

    pub fn combinations(&self) -> Vec<HyperParams> {
        let mut out = Vec::new();
        for &n_trees in &self.n_trees {
            for &mult in &self.max_features_multiplier {
                for &depth in &self.max_depth {
                    for &criterion in &self.criterion {
                        out.push(HyperParams {
                            n_trees,
                            max_features_multiplier: mult,
                            max_depth: depth,
                            min_samples_leaf: self.min_samples_leaf,
                            criterion,
                            seed: 0,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal {
        col: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Evaluate one dense feature vector; returns the leaf probability
    /// vector.
    pub fn eval(&self, feature: impl Fn(u32) -> f64) -> &[f64] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Internal {
                    col,
                    threshold,
                    left,
                    right,
                } => {
                    at = if feature(*col) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { probs } => return probs,
            }
        }
    }

    #[cfg(test)]
    fn max_depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Internal { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: HyperParams,
    pub classes: Vec<String>,
    /// Item keys of the training matrix, in column order.
    pub feature_keys: Vec<String>,
    pub trees: Vec<Tree>,
    /// Per-column, non-negative, sums to 1 (all zero for a constant model).
    pub importances: Vec<f64>,
    /// Inverse-frequency class weights of the full training set.
    pub training_class_weights: Vec<f64>,
    /// Set when training saw a single class; predictions are constant.
    pub degenerate: bool,
}

const MODEL_FORMAT: &str = "morallens.forest.v1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    model: ForestModel,
}

impl ForestModel {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Serialize to the versioned model format. Loading reproduces
    /// predictions bit for bit (JSON floats round-trip exactly).
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            format: MODEL_FORMAT.to_string(),
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ForestError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ForestError::BadModelFile(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(ForestError::BadModelFile(format!(
                "unsupported format {:?}",
                file.format
            )));
        }
        Ok(file.model)
    }

    /// Predict class probabilities; the matrix must carry exactly the
    /// model's training vocabulary.
    pub fn predict_proba(&self, x: &SparseMatrix) -> Result<Vec<Vec<f64>>, ForestError> {
        if x.vocab().keys() != self.feature_keys.as_slice() {
            return Err(ForestError::VocabularyMismatch(format!(
                "{} columns vs {} model features",
                x.n_cols(),
                self.feature_keys.len()
            )));
        }
        let identity: Vec<Option<u32>> = (0..x.n_cols() as u32).map(Some).collect();
        Ok(self.predict_with_map(x, &identity))
    }

    /// Predict after mapping the matrix's columns onto the model vocabulary
    /// by item key; items unseen in training are ignored.
    pub fn predict_proba_mapped(&self, x: &SparseMatrix) -> Vec<Vec<f64>> {
        let lookup: std::collections::HashMap<&str, u32> = self
            .feature_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i as u32))
            .collect();
        let map: Vec<Option<u32>> = x
            .vocab()
            .keys()
            .iter()
            .map(|k| lookup.get(k.as_str()).copied())
            .collect();
        self.predict_with_map(x, &map)
    }

    fn predict_with_map(&self, x: &SparseMatrix, col_map: &[Option<u32>]) -> Vec<Vec<f64>> {
        let k = self.n_classes();
        let n_features = self.feature_keys.len();
        let mut dense = vec![0.0f64; n_features];
        let mut touched: Vec<u32> = Vec::new();
        let mut out = Vec::with_capacity(x.n_rows());
        for r in 0..x.n_rows() {
            for &c in &touched {
                dense[c as usize] = 0.0;
            }
            touched.clear();
            let (cols, vals) = x.row(r);
            for (c, v) in cols.iter().zip(vals) {
                if let Some(mc) = col_map[*c as usize] {
                    dense[mc as usize] = *v;
                    touched.push(mc);
                }
            }
            let mut acc = vec![0.0f64; k];
            for tree in &self.trees {
                let probs = tree.eval(|col| dense[col as usize]);
                for (a, p) in acc.iter_mut().zip(probs) {
                    *a += p;
                }
            }
            let nt = self.trees.len().max(1) as f64;
            for a in &mut acc {
                *a /= nt;
            }
            out.push(acc);
        }
        out
    }

    /// Scores for one class across rows.
    pub fn class_scores(&self, probs: &[Vec<f64>], class: usize) -> Vec<f64> {
        probs.iter().map(|p| p[class]).collect()
    }
}

/// Ranked (item key, importance) pairs, descending with lexicographic
/// tie-breaks.
pub fn feature_importances(model: &ForestModel) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = model
        .feature_keys
        .iter()
        .cloned()
        .zip(model.importances.iter().copied())
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite importance")
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked
}

/// Train a forest; `y[i]` indexes into `classes`.
pub fn train_forest(
    x: &SparseMatrix,
    y: &[u32],
    classes: &[String],
    params: &HyperParams,
) -> Result<ForestModel, ForestError> {
    train_forest_jobs(x, y, classes, params, 1)
}

/// Same as [`train_forest`] with bounded tree-level parallelism; results are
/// identical for any worker count.
pub fn train_forest_jobs(
    x: &SparseMatrix,
    y: &[u32],
    classes: &[String],
    params: &HyperParams,
    workers: usize,
) -> Result<ForestModel, ForestError> {
    let n = x.n_rows();
    if n == 0 || y.is_empty() {
        return Err(ForestError::EmptyTraining);
    }
    assert_eq!(n, y.len(), "row count and label count differ");
    let k = classes.len();
    for &label in y {
        if label as usize >= k {
            return Err(ForestError::LabelOutOfRange(label, k));
        }
    }

    let mut full_counts = vec![0f64; k];
    for &label in y {
        full_counts[label as usize] += 1.0;
    }
    let present = full_counts.iter().filter(|&&c| c > 0.0).count();
    let training_class_weights = balanced_weights(&full_counts);

    if present < 2 {
        // Constant model, flagged; every prediction is the observed class.
        let class = full_counts.iter().position(|&c| c > 0.0).unwrap_or(0);
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        let tree = Tree {
            nodes: vec![Node::Leaf { probs }],
        };
        return Ok(ForestModel {
            params: params.clone(),
            classes: classes.to_vec(),
            feature_keys: x.vocab().keys().to_vec(),
            trees: vec![tree; params.n_trees],
            importances: vec![0.0; x.n_cols()],
            training_class_weights,
            degenerate: true,
        });
    }

    let csc = x.to_csc();
    let mtry = params.max_features(x.n_cols());
    let built = jobs::run_indexed(params.n_trees, workers, |t| {
        let seed = derive_seed(params.seed, stream::TREE, t as u64);
        grow_tree(&csc, x.n_cols(), n, y, k, params, mtry, seed)
    });

    let mut importances = vec![0.0f64; x.n_cols()];
    let mut trees = Vec::with_capacity(built.len());
    for (tree, tree_importance) in built {
        let total: f64 = tree_importance.iter().sum();
        if total > 0.0 {
            for (acc, imp) in importances.iter_mut().zip(&tree_importance) {
                *acc += imp / total;
            }
        }
        trees.push(tree);
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        for imp in &mut importances {
            *imp /= total;
        }
    }

    Ok(ForestModel {
        params: params.clone(),
        classes: classes.to_vec(),
        feature_keys: x.vocab().keys().to_vec(),
        trees,
        importances,
        training_class_weights,
        degenerate: false,
    })
}

/// Inverse-frequency weights: n / (k_present * count_c) for present classes.
fn balanced_weights(counts: &[f64]) -> Vec<f64> {
    let n: f64 = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0.0).count().max(1) as f64;
    counts
        .iter()
        .map(|&c| if c > 0.0 { n / (present * c) } else { 0.0 })
        .collect()
}

struct TreeBuilder<'a> {
    csc: &'a CscView,
    y: &'a [u32],
    k: usize,
    class_weights: Vec<f64>,
    params: &'a HyperParams,
    mtry: usize,
    n_cols: usize,
    entries: Vec<u32>,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    rng: ChaCha8Rng,
    col_perm: Vec<u32>,
    // Column-value scratch, epoch-marked.
    val_of_row: Vec<f64>,
    val_epoch: Vec<u32>,
    epoch: u32,
    // Reusable split-scan buffers.
    nz: Vec<(f64, u32)>,
    scratch: Vec<u32>,
}

#[allow(clippy::too_many_arguments)]
fn grow_tree(
    csc: &CscView,
    n_cols: usize,
    n_rows: usize,
    y: &[u32],
    k: usize,
    params: &HyperParams,
    mtry: usize,
    seed: u64,
) -> (Tree, Vec<f64>) {
    let mut rng = rng_from(seed);
    use rand::Rng;
    // Bootstrap sample, with replacement, size n.
    let entries: Vec<u32> = (0..n_rows)
        .map(|_| rng.random_range(0..n_rows) as u32)
        .collect();
    let mut boot_counts = vec![0f64; k];
    for &e in &entries {
        boot_counts[y[e as usize] as usize] += 1.0;
    }
    let class_weights = balanced_weights(&boot_counts);

    let n_entries = entries.len();
    let mut builder = TreeBuilder {
        csc,
        y,
        k,
        class_weights,
        params,
        mtry,
        n_cols,
        entries,
        nodes: Vec::new(),
        importance: vec![0.0; n_cols],
        rng,
        col_perm: (0..n_cols as u32).collect(),
        val_of_row: vec![0.0; n_rows],
        val_epoch: vec![0; n_rows],
        epoch: 0,
        nz: Vec::new(),
        scratch: Vec::with_capacity(n_entries),
    };
    builder.build(0, n_entries, 0);
    let TreeBuilder {
        nodes, importance, ..
    } = builder;
    (Tree { nodes }, importance)
}

struct BestSplit {
    col: u32,
    threshold: f64,
    decrease: f64,
}

impl<'a> TreeBuilder<'a> {
    fn weighted_counts(&self, start: usize, end: usize) -> Vec<f64> {
        let mut counts = vec![0f64; self.k];
        for &e in &self.entries[start..end] {
            let c = self.y[e as usize] as usize;
            counts[c] += self.class_weights[c];
        }
        counts
    }

    /// Entry values in column `col` (zero when absent). Small nodes use
    /// per-row binary search over the CSC column; large ones scan it once.
    fn load_column(&mut self, col: u32, start: usize, end: usize) {
        let lo = self.csc.col_offsets[col as usize];
        let hi = self.csc.col_offsets[col as usize + 1];
        let col_rows = &self.csc.row_indices[lo..hi];
        let col_vals = &self.csc.values[lo..hi];
        self.epoch += 1;
        let node_n = end - start;
        if node_n * 8 < col_rows.len() {
            // Mark node rows, then probe each by binary search.
            for &e in &self.entries[start..end] {
                let r = e as usize;
                if self.val_epoch[r] != self.epoch {
                    self.val_epoch[r] = self.epoch;
                    self.val_of_row[r] = match col_rows.binary_search(&e) {
                        Ok(at) => col_vals[at],
                        Err(_) => 0.0,
                    };
                }
            }
        } else {
            for &e in &self.entries[start..end] {
                let r = e as usize;
                if self.val_epoch[r] != self.epoch {
                    self.val_epoch[r] = self.epoch;
                    self.val_of_row[r] = 0.0;
                }
            }
            for (r, v) in col_rows.iter().zip(col_vals) {
                let r = *r as usize;
                if self.val_epoch[r] == self.epoch {
                    self.val_of_row[r] = *v;
                }
            }
        }
    }

    /// Scan one column for the best boundary. Zeros form the implicit first
    /// value group; thresholds are midpoints between adjacent distinct
    /// values.
    fn scan_column(
        &mut self,
        col: u32,
        start: usize,
        end: usize,
        node_counts: &[f64],
        node_imp: f64,
    ) -> Option<BestSplit> {
        self.load_column(col, start, end);
        let node_n = end - start;
        self.nz.clear();
        let mut zero_n = 0usize;
        let mut zero_w = vec![0f64; self.k];
        for &e in &self.entries[start..end] {
            let v = self.val_of_row[e as usize];
            let c = self.y[e as usize] as usize;
            if v == 0.0 {
                zero_n += 1;
                zero_w[c] += self.class_weights[c];
            } else {
                self.nz.push((v, c as u32));
            }
        }
        if self.nz.is_empty() {
            return None; // constant zero column within the node
        }
        self.nz
            .sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite count"));

        let w_total: f64 = node_counts.iter().sum();
        let msl = self.params.min_samples_leaf;
        let mut left_w = vec![0f64; self.k];
        let mut left_n = 0usize;
        let mut prev_value = 0.0f64;
        if zero_n > 0 {
            left_w.copy_from_slice(&zero_w);
            left_n = zero_n;
        } else {
            // Left starts with the first value group.
            let first = self.nz[0].0;
            let mut i = 0;
            while i < self.nz.len() && self.nz[i].0 == first {
                let c = self.nz[i].1 as usize;
                left_w[c] += self.class_weights[c];
                left_n += 1;
                i += 1;
            }
            prev_value = first;
        }

        let mut best: Option<BestSplit> = None;
        let mut i = if zero_n > 0 {
            0
        } else {
            left_n // entries already consumed into the left side
        };
        while left_n < node_n {
            let group_value = self.nz[i].0;
            // Boundary between prev_value and group_value.
            if left_n >= msl && (node_n - left_n) >= msl {
                let left_total: f64 = left_w.iter().sum();
                let right_w: Vec<f64> = node_counts
                    .iter()
                    .zip(&left_w)
                    .map(|(t, l)| t - l)
                    .collect();
                let right_total = w_total - left_total;
                if left_total > 0.0 && right_total > 0.0 {
                    let imp_l = impurity(self.params.criterion, &left_w);
                    let imp_r = impurity(self.params.criterion, &right_w);
                    let decrease = w_total * node_imp - left_total * imp_l - right_total * imp_r;
                    if best.as_ref().is_none_or(|b| decrease > b.decrease) && decrease > 0.0 {
                        best = Some(BestSplit {
                            col,
                            threshold: 0.5 * (prev_value + group_value),
                            decrease,
                        });
                    }
                }
            }
            // Absorb the group into the left side.
            while i < self.nz.len() && self.nz[i].0 == group_value {
                let c = self.nz[i].1 as usize;
                left_w[c] += self.class_weights[c];
                left_n += 1;
                i += 1;
            }
            prev_value = group_value;
        }
        best
    }

    fn build(&mut self, start: usize, end: usize, depth: usize) -> u32 {
        let node_counts = self.weighted_counts(start, end);
        let node_n = end - start;
        let present = node_counts.iter().filter(|&&c| c > 0.0).count();
        let node_imp = impurity(self.params.criterion, &node_counts);

        let make_leaf = |counts: &[f64], nodes: &mut Vec<Node>| -> u32 {
            let total: f64 = counts.iter().sum();
            let probs = counts.iter().map(|c| c / total).collect();
            nodes.push(Node::Leaf { probs });
            (nodes.len() - 1) as u32
        };

        if depth >= self.params.max_depth
            || node_n < 2 * self.params.min_samples_leaf
            || present < 2
        {
            return make_leaf(&node_counts, &mut self.nodes);
        }

        // Sample mtry candidate columns without replacement.
        use rand::Rng;
        let mut best: Option<BestSplit> = None;
        for i in 0..self.mtry {
            let j = self.rng.random_range(i..self.n_cols);
            self.col_perm.swap(i, j);
            let col = self.col_perm[i];
            if let Some(split) = self.scan_column(col, start, end, &node_counts, node_imp) {
                if best.as_ref().is_none_or(|b| split.decrease > b.decrease) {
                    best = Some(split);
                }
            }
        }
        let Some(split) = best else {
            return make_leaf(&node_counts, &mut self.nodes);
        };

        self.importance[split.col as usize] += split.decrease;

        // Stable partition on the winning column.
        self.load_column(split.col, start, end);
        self.scratch.clear();
        let mut mid = start;
        for at in start..end {
            let e = self.entries[at];
            if self.val_of_row[e as usize] <= split.threshold {
                self.entries[mid] = e;
                mid += 1;
            } else {
                self.scratch.push(e);
            }
        }
        self.entries[mid..end].copy_from_slice(&self.scratch);
        debug_assert!(mid > start && mid < end, "split produces two children");

        let placeholder = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { probs: Vec::new() });
        let left = self.build(start, mid, depth + 1);
        let right = self.build(mid, end, depth + 1);
        self.nodes[placeholder as usize] = Node::Internal {
            col: split.col,
            threshold: split.threshold,
            left,
            right,
        };
        placeholder
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Vocabulary;
    use std::collections::HashMap;

    fn count_matrix(rows: &[Vec<(usize, f64)>], n_cols: usize) -> SparseMatrix {
        let keys: Vec<String> = (0..n_cols).map(|i| format!("web:c{i:03}")).collect();
        let maps: Vec<HashMap<String, f64>> = rows
            .iter()
            .map(|r| r.iter().map(|(c, v)| (keys[*c].clone(), *v)).collect())
            .collect();
        SparseMatrix::from_rows(&maps, Vocabulary::from_keys(keys))
    }

    /// Two classes separated perfectly by column 0, with noise in column 1.
    fn separable(n_per_class: usize) -> (SparseMatrix, Vec<u32>) {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n_per_class {
            rows.push(vec![(0, 5.0 + (i % 3) as f64), (1, (i % 7) as f64)]);
            y.push(1);
            rows.push(vec![(1, ((i + 3) % 7) as f64)]);
            y.push(0);
        }
        (count_matrix(&rows, 3), y)
    }

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("C{c}")).collect()
    }

    #[test]
    fn gini_reference_values() {
        assert_eq!(gini_impurity(&[2.0, 2.0]).unwrap(), 0.5);
        assert_eq!(gini_impurity(&[4.0, 0.0]).unwrap(), 0.0);
        // 1 - (9/16 + 1/16)
        assert!((gini_impurity(&[3.0, 1.0]).unwrap() - 0.375).abs() < 1e-15);
        assert!(gini_impurity(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(entropy_impurity(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(entropy_impurity(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy_impurity(&[3.0, 1.0]).unwrap() - 0.811278).abs() < 1e-6);
        assert!(entropy_impurity(&[]).is_err());
    }

    #[test]
    fn impurity_is_invariant_to_duplicating_every_row() {
        // Doubling all counts leaves proportions, hence impurity, unchanged.
        for counts in [[3.0, 1.0], [2.0, 2.0], [5.0, 0.0]] {
            let doubled: Vec<f64> = counts.iter().map(|c| c * 2.0).collect();
            assert!(
                (gini_impurity(&counts).unwrap() - gini_impurity(&doubled).unwrap()).abs() < 1e-15
            );
            assert!(
                (entropy_impurity(&counts).unwrap() - entropy_impurity(&doubled).unwrap()).abs()
                    < 1e-15
            );
        }
    }

    #[test]
    fn separable_column_dominates() {
        let (x, y) = separable(30);
        let params = HyperParams {
            n_trees: 30,
            max_depth: 5,
            ..HyperParams::default()
        };
        let model = train_forest(&x, &y, &classes(2), &params).unwrap();
        let probs = model.predict_proba(&x).unwrap();
        let scores = model.class_scores(&probs, 1);
        let labels: Vec<bool> = y.iter().map(|&l| l == 1).collect();
        let roc = crate::eval::auroc(&scores, &labels).unwrap();
        assert_eq!(roc.auroc, 1.0, "training AUROC on separable data");
        assert!(
            model.importances[0] > 0.5,
            "importance of the separating column = {}",
            model.importances[0]
        );
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (x, y) = separable(20);
        let params = HyperParams {
            n_trees: 12,
            seed: 77,
            ..HyperParams::default()
        };
        let a = train_forest(&x, &y, &classes(2), &params).unwrap();
        let b = train_forest_jobs(&x, &y, &classes(2), &params, 4).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "worker count must not matter");
        let pa = a.predict_proba(&x).unwrap();
        let pb = b.predict_proba(&x).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn prediction_is_mean_of_individual_trees() {
        let (x, y) = separable(25);
        let params = HyperParams {
            n_trees: 300,
            max_depth: 6,
            seed: 5,
            ..HyperParams::default()
        };
        let model = train_forest(&x, &y, &classes(2), &params).unwrap();
        let probs = model.predict_proba(&x).unwrap();
        // Oracle: evaluate each tree separately and average.
        #[allow(clippy::needless_range_loop)]
        for r in 0..x.n_rows() {
            let (cols, vals) = x.row(r);
            let mut dense = vec![0.0; x.n_cols()];
            for (c, v) in cols.iter().zip(vals) {
                dense[*c as usize] = *v;
            }
            let mut acc = [0.0f64; 2];
            for tree in &model.trees {
                let p = tree.eval(|c| dense[c as usize]);
                acc[0] += p[0];
                acc[1] += p[1];
            }
            for (k, a) in acc.iter().enumerate() {
                assert!(
                    (a / model.trees.len() as f64 - probs[r][k]).abs() < 1e-12,
                    "row {r} class {k}"
                );
            }
        }
    }

    #[test]
    fn per_row_probabilities_sum_to_one() {
        let (x, y) = separable(20);
        let model = train_forest(
            &x,
            &y,
            &classes(2),
            &HyperParams {
                n_trees: 40,
                ..HyperParams::default()
            },
        )
        .unwrap();
        for p in model.predict_proba(&x).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_training_yields_flagged_constant_model() {
        let (x, _) = separable(10);
        let y = vec![0u32; x.n_rows()];
        let model = train_forest(&x, &y, &classes(2), &HyperParams::default()).unwrap();
        assert!(model.degenerate);
        assert!(model.importances.iter().all(|&i| i == 0.0));
        for p in model.predict_proba(&x).unwrap() {
            assert_eq!(p[0], 1.0);
        }
    }

    #[test]
    fn single_tree_single_row_returns_leaf_probabilities() {
        let (x, y) = separable(10);
        let params = HyperParams {
            n_trees: 1,
            ..HyperParams::default()
        };
        let model = train_forest(&x, &y, &classes(2), &params).unwrap();
        let one = x.select_rows(&[0]);
        let probs = model.predict_proba(&one).unwrap();
        let (cols, vals) = x.row(0);
        let mut dense = vec![0.0; x.n_cols()];
        for (c, v) in cols.iter().zip(vals) {
            dense[*c as usize] = *v;
        }
        let leaf = model.trees[0].eval(|c| dense[c as usize]);
        assert_eq!(probs[0], leaf.to_vec());
    }

    #[test]
    fn leaf_support_respects_min_samples_leaf() {
        // Count bootstrap entries reaching each leaf; every leaf must hold
        // at least min_samples_leaf of them. Rebuild the bootstrap from the
        // same derived seed the trainer used.
        let (x, y) = separable(40);
        let params = HyperParams {
            n_trees: 10,
            max_depth: 15,
            seed: 3,
            ..HyperParams::default()
        };
        let model = train_forest(&x, &y, &classes(2), &params).unwrap();
        use rand::Rng;
        for (t, tree) in model.trees.iter().enumerate() {
            let mut rng = rng_from(derive_seed(params.seed, stream::TREE, t as u64));
            let entries: Vec<usize> = (0..x.n_rows())
                .map(|_| rng.random_range(0..x.n_rows()))
                .collect();
            let mut leaf_support: HashMap<usize, usize> = HashMap::new();
            for &e in &entries {
                let (cols, vals) = x.row(e);
                let mut dense = vec![0.0; x.n_cols()];
                for (c, v) in cols.iter().zip(vals) {
                    dense[*c as usize] = *v;
                }
                let mut at = 0usize;
                while let Node::Internal {
                    col,
                    threshold,
                    left,
                    right,
                } = &tree.nodes[at]
                {
                    at = if dense[*col as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                *leaf_support.entry(at).or_insert(0) += 1;
            }
            for (leaf, support) in leaf_support {
                assert!(
                    support >= params.min_samples_leaf,
                    "tree {t} leaf {leaf} support {support}"
                );
            }
            assert!(tree.max_depth() <= params.max_depth);
        }
    }

    #[test]
    fn monotone_transform_preserves_partitions() {
        let (x, y) = separable(25);
        let params = HyperParams {
            n_trees: 8,
            seed: 11,
            ..HyperParams::default()
        };
        let model_a = train_forest(&x, &y, &classes(2), &params).unwrap();
        // Square every value: strictly increasing on non-negative counts.
        let maps: Vec<HashMap<String, f64>> = (0..x.n_rows())
            .map(|r| {
                let (cols, vals) = x.row(r);
                cols.iter()
                    .zip(vals)
                    .map(|(c, v)| (x.vocab().key(*c).to_string(), v * v))
                    .collect()
            })
            .collect();
        let x2 = SparseMatrix::from_rows(&maps, x.vocab().clone());
        let model_b = train_forest(&x2, &y, &classes(2), &params).unwrap();
        // Thresholds differ but the partition of training rows (hence the
        // predicted probabilities) must be identical.
        let pa = model_a.predict_proba(&x).unwrap();
        let pb = model_b.predict_proba(&x2).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn importances_are_normalized_and_ranked() {
        let (x, y) = separable(30);
        let model = train_forest(
            &x,
            &y,
            &classes(2),
            &HyperParams {
                n_trees: 50,
                ..HyperParams::default()
            },
        )
        .unwrap();
        let total: f64 = model.importances.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(model.importances.iter().all(|&i| i >= 0.0));
        let ranked = feature_importances(&model);
        assert_eq!(ranked[0].0, "web:c000");
        for pair in ranked.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }
    }

    #[test]
    fn model_json_round_trip_reproduces_predictions() {
        let (x, y) = separable(15);
        let model = train_forest(
            &x,
            &y,
            &classes(2),
            &HyperParams {
                n_trees: 7,
                seed: 1234,
                ..HyperParams::default()
            },
        )
        .unwrap();
        let loaded = ForestModel::from_json(&model.to_json()).unwrap();
        assert_eq!(
            model.predict_proba(&x).unwrap(),
            loaded.predict_proba(&x).unwrap()
        );
        assert!(ForestModel::from_json("{}").is_err());
    }

    #[test]
    fn mapped_prediction_ignores_unknown_items_and_checks_vocab() {
        let (x, y) = separable(15);
        let model = train_forest(
            &x,
            &y,
            &classes(2),
            &HyperParams {
                n_trees: 5,
                ..HyperParams::default()
            },
        )
        .unwrap();
        // A matrix with one extra, unseen column.
        let keys: Vec<String> = (0..4).map(|i| format!("web:c{i:03}")).collect();
        let maps: Vec<HashMap<String, f64>> = (0..x.n_rows())
            .map(|r| {
                let (cols, vals) = x.row(r);
                let mut m: HashMap<String, f64> = cols
                    .iter()
                    .zip(vals)
                    .map(|(c, v)| (x.vocab().key(*c).to_string(), *v))
                    .collect();
                m.insert("web:c003".into(), 9.0);
                m
            })
            .collect();
        let wider = SparseMatrix::from_rows(&maps, Vocabulary::from_keys(keys));
        assert!(model.predict_proba(&wider).is_err());
        let mapped = model.predict_proba_mapped(&wider);
        assert_eq!(mapped, model.predict_proba(&x).unwrap());
    }

    #[test]
    fn grid_enumerates_in_canonical_order() {
        let grid = HyperGrid::paper();
        let combos = grid.combinations();
        assert_eq!(combos.len(), 54);
        assert_eq!(combos[0].n_trees, 150);
        assert_eq!(combos[0].criterion, Criterion::Entropy);
        assert!(combos.iter().all(|c| c.min_samples_leaf == 5));
    }
}
