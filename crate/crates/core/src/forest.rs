//! Random forest classifier: Gini-impurity splits over per-node feature
//! subsets, bootstrap sampling, impurity-based importance, and the
//! two-stage hyperparameter cross-validation (mtry x depth surface first,
//! then mtry alone at unlimited depth).
//!
//! Trees are grown depth-first with one RNG stream per tree derived from
//! (seed, tree index), so ensembles are identical for any thread count.

use crate::error::{Error, Result};
use crate::folds::{fold_complement, kfold_indices};
use crate::par::{map_indexed, try_map_indexed};
use crate::rng::{derive_seed, rng_from_seed, Stream};
use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How per-tree outputs combine into an ensemble probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of leaf probabilities (default; smoother ROC curves).
    MeanProbability,
    /// Fraction of trees voting for the positive class.
    HardVote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfConfig {
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    /// Fraction of features drawn as candidates at every node.
    #[serde(default = "default_mtry")]
    pub mtry_fraction: f64,
    /// None grows to purity.
    #[serde(default)]
    pub max_depth: Option<usize>,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
}

fn default_trees() -> usize {
    5000
}
pub fn default_mtry() -> f64 {
    1.0 / 3.0
}
fn default_min_leaf() -> usize {
    1
}
fn default_aggregation() -> Aggregation {
    Aggregation::MeanProbability
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            n_trees: default_trees(),
            mtry_fraction: default_mtry(),
            max_depth: None,
            min_leaf: default_min_leaf(),
            seed: 0,
            aggregation: default_aggregation(),
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        if !(self.mtry_fraction > 0.0 && self.mtry_fraction <= 1.0) {
            return Err(Error::Config("mtry_fraction must be in (0,1]".into()));
        }
        if self.min_leaf < 1 {
            return Err(Error::Config("min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

/// Binary classification tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        /// Positive-class fraction of the node's training samples.
        probability: f64,
        samples: usize,
    },
}

impl TreeNode {
    fn predict(&self, row: impl Fn(usize) -> f64 + Copy) -> f64 {
        match self {
            TreeNode::Leaf { probability, .. } => *probability,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row(*feature) <= *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }

    pub fn n_splits(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.n_splits() + right.n_splits(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<TreeNode>,
    pub config: RfConfig,
    pub n_features: usize,
    /// Per-feature impurity decrease summed over splits, weighted by node
    /// fraction, averaged over trees. Not normalized.
    pub raw_importance: Vec<f64>,
}

/// Binary Gini impurity of a (positive, negative) count pair.
pub fn gini(pos: usize, neg: usize) -> Result<f64> {
    let total = pos + neg;
    if total == 0 {
        return Err(Error::EmptyNode);
    }
    Ok(gini_unchecked(pos, neg))
}

#[inline]
fn gini_unchecked(pos: usize, neg: usize) -> f64 {
    let total = (pos + neg) as f64;
    let p1 = pos as f64 / total;
    let p0 = neg as f64 / total;
    1.0 - p0 * p0 - p1 * p1
}

/// A chosen split: threshold is the midpoint between two consecutive
/// distinct values of the feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub decrease: f64,
}

/// Order-preserving bit transform for fast f64 sorting.
#[inline]
fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | 0x8000_0000_0000_0000
    }
}

#[inline]
fn bits_to_f64(k: u64) -> f64 {
    if k >> 63 == 1 {
        f64::from_bits(k & 0x7FFF_FFFF_FFFF_FFFF)
    } else {
        f64::from_bits(!k)
    }
}

/// Midpoint between consecutive distinct values, guarded so that
/// `x <= threshold` keeps the lower value on the left even when the
/// midpoint rounds up.
fn midpoint(a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    if mid >= b || !mid.is_finite() {
        a
    } else {
        mid
    }
}

const MIN_DECREASE: f64 = 1e-12;

/// Best split over the candidate features: evaluates the midpoints between
/// consecutive sorted distinct values of each candidate and maximizes the
/// impurity decrease. Ties resolve to the lower (feature, threshold);
/// `None` when nothing decreases impurity or `min_leaf` blocks every cut.
pub fn best_split(
    cols: &[Vec<f64>],
    y: &[u8],
    samples: &[u32],
    features: &[usize],
    min_leaf: usize,
    scratch: &mut Vec<(u64, u8)>,
) -> Option<SplitCandidate> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let pos_total = samples.iter().filter(|&&i| y[i as usize] == 1).count();
    let neg_total = n - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return None;
    }
    let parent = gini_unchecked(pos_total, neg_total);
    let nf = n as f64;
    let mut best: Option<SplitCandidate> = None;

    for &feature in features {
        let col = &cols[feature];
        scratch.clear();
        scratch.extend(
            samples
                .iter()
                .map(|&i| (ordered_bits(col[i as usize]), y[i as usize])),
        );
        scratch.sort_unstable_by_key(|t| t.0);

        let mut left_pos = 0usize;
        let mut left_neg = 0usize;
        let mut i = 0usize;
        while i < n {
            let key = scratch[i].0;
            let mut group_pos = 0usize;
            while i < n && scratch[i].0 == key {
                group_pos += usize::from(scratch[i].1 == 1);
                i += 1;
            }
            // Samples consumed so far minus the previous left size.
            let group_total = i - (left_pos + left_neg);
            let group_neg = group_total - group_pos;
            left_pos += group_pos;
            left_neg += group_neg;
            if i == n {
                break; // no distinct value to the right
            }
            let nl = left_pos + left_neg;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let right_pos = pos_total - left_pos;
            let right_neg = neg_total - left_neg;
            let weighted = (nl as f64 * gini_unchecked(left_pos, left_neg)
                + nr as f64 * gini_unchecked(right_pos, right_neg))
                / nf;
            let decrease = parent - weighted;
            if decrease > MIN_DECREASE && best.is_none_or(|b| decrease > b.decrease) {
                let threshold = midpoint(bits_to_f64(key), bits_to_f64(scratch[i].0));
                best = Some(SplitCandidate {
                    feature,
                    threshold,
                    decrease,
                });
            }
        }
    }
    best
}

/// Per-forest column index: each value replaced by its rank among the
/// column's sorted distinct values. Node-level split search then sorts
/// small integer codes instead of floats, and partitions by rank bound,
/// which is exactly equivalent to the value/midpoint rule.
pub struct ColumnIndex {
    pub ranks: Vec<Vec<u32>>,
    pub distinct: Vec<Vec<f64>>,
}

pub fn index_columns(cols: &[Vec<f64>]) -> ColumnIndex {
    let n = cols.first().map_or(0, Vec::len);
    let mut ranks = Vec::with_capacity(cols.len());
    let mut distinct = Vec::with_capacity(cols.len());
    let mut order: Vec<u32> = (0..n as u32).collect();
    for col in cols {
        order.sort_unstable_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
        let mut col_ranks = vec![0u32; n];
        let mut values: Vec<f64> = Vec::new();
        for &row in &order {
            let v = col[row as usize];
            if values.last() != Some(&v) {
                values.push(v);
            }
            col_ranks[row as usize] = (values.len() - 1) as u32;
        }
        ranks.push(col_ranks);
        distinct.push(values);
    }
    ColumnIndex { ranks, distinct }
}

#[derive(Debug, Clone, Copy)]
struct RankedSplit {
    feature: usize,
    /// Ranks <= boundary go left.
    boundary: u32,
    threshold: f64,
    decrease: f64,
}

/// Rank-space twin of [`best_split`]: identical choice and threshold,
/// computed over packed `(rank << 1 | label)` codes.
fn best_split_ranked(
    index: &ColumnIndex,
    y: &[u8],
    samples: &[u32],
    features: &[usize],
    min_leaf: usize,
    scratch: &mut Vec<u32>,
) -> Option<RankedSplit> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let pos_total = samples.iter().filter(|&&i| y[i as usize] == 1).count();
    let neg_total = n - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return None;
    }
    let parent = gini_unchecked(pos_total, neg_total);
    let nf = n as f64;
    let mut best: Option<RankedSplit> = None;

    for &feature in features {
        let ranks = &index.ranks[feature];
        scratch.clear();
        scratch.extend(
            samples
                .iter()
                .map(|&i| (ranks[i as usize] << 1) | u32::from(y[i as usize])),
        );
        scratch.sort_unstable();

        let mut left_pos = 0usize;
        let mut left_neg = 0usize;
        let mut i = 0usize;
        while i < n {
            let rank = scratch[i] >> 1;
            let mut group_pos = 0usize;
            while i < n && scratch[i] >> 1 == rank {
                group_pos += (scratch[i] & 1) as usize;
                i += 1;
            }
            let group_total = i - (left_pos + left_neg);
            left_pos += group_pos;
            left_neg += group_total - group_pos;
            if i == n {
                break;
            }
            let nl = left_pos + left_neg;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let right_pos = pos_total - left_pos;
            let right_neg = neg_total - left_neg;
            let weighted = (nl as f64 * gini_unchecked(left_pos, left_neg)
                + nr as f64 * gini_unchecked(right_pos, right_neg))
                / nf;
            let decrease = parent - weighted;
            if decrease > MIN_DECREASE
                && best.is_none_or(|b| decrease > b.decrease)
            {
                // Midpoint between this group's value and the next distinct
                // value present in the node's samples.
                let next_rank = scratch[i] >> 1;
                let values = &index.distinct[feature];
                let threshold = midpoint(values[rank as usize], values[next_rank as usize]);
                best = Some(RankedSplit {
                    feature,
                    boundary: rank,
                    threshold,
                    decrease,
                });
            }
        }
    }
    best
}

struct TreeBuilder<'a> {
    index: &'a ColumnIndex,
    y: &'a [u8],
    config: &'a RfConfig,
    k: usize,
    n_root: f64,
    rng: crate::rng::SeededRng,
    feat_buf: Vec<usize>,
    feat_pick: Vec<usize>,
    scratch: Vec<u32>,
    importance: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, samples: Vec<u32>, depth: usize) -> TreeNode {
        let n = samples.len();
        let pos = samples.iter().filter(|&&i| self.y[i as usize] == 1).count();
        let leaf = |pos: usize, n: usize| TreeNode::Leaf {
            probability: pos as f64 / n as f64,
            samples: n,
        };
        if pos == 0 || pos == n || n < 2 * self.config.min_leaf.max(1) {
            return leaf(pos, n);
        }
        if let Some(limit) = self.config.max_depth {
            if depth >= limit {
                return leaf(pos, n);
            }
        }

        // Fresh uniform feature subset at every node.
        let p = self.index.ranks.len();
        for i in 0..self.k {
            let j = self.rng.random_range(i..p);
            self.feat_buf.swap(i, j);
        }
        self.feat_pick.clear();
        self.feat_pick.extend_from_slice(&self.feat_buf[..self.k]);
        self.feat_pick.sort_unstable();

        let split = best_split_ranked(
            self.index,
            self.y,
            &samples,
            &self.feat_pick,
            self.config.min_leaf,
            &mut self.scratch,
        );
        let Some(split) = split else {
            return leaf(pos, n);
        };
        self.importance[split.feature] += (n as f64 / self.n_root) * split.decrease;

        let ranks = &self.index.ranks[split.feature];
        let (left, right): (Vec<u32>, Vec<u32>) = samples
            .into_iter()
            .partition(|&i| ranks[i as usize] <= split.boundary);
        debug_assert!(left.len() >= self.config.min_leaf && right.len() >= self.config.min_leaf);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(self.grow(left, depth + 1)),
            right: Box::new(self.grow(right, depth + 1)),
        }
    }
}

/// Bootstrap row indices for one tree: n draws with replacement from the
/// tree's own RNG stream.
pub fn bootstrap_indices(seed: u64, tree: usize, n: usize) -> (Vec<u32>, crate::rng::SeededRng) {
    let mut rng = rng_from_seed(derive_seed(seed, Stream::ForestTree, tree as u64));
    let indices = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
    (indices, rng)
}

/// Grow one tree on a bootstrap sample, deterministic in the RNG stream.
pub fn grow_tree(
    cols: &[Vec<f64>],
    y: &[u8],
    samples: Vec<u32>,
    config: &RfConfig,
    rng: crate::rng::SeededRng,
) -> (TreeNode, Vec<f64>) {
    let index = index_columns(cols);
    grow_tree_indexed(&index, y, samples, config, rng)
}

fn grow_tree_indexed(
    index: &ColumnIndex,
    y: &[u8],
    samples: Vec<u32>,
    config: &RfConfig,
    rng: crate::rng::SeededRng,
) -> (TreeNode, Vec<f64>) {
    let p = index.ranks.len();
    let k = ((config.mtry_fraction * p as f64).ceil() as usize).clamp(1, p);
    let mut builder = TreeBuilder {
        index,
        y,
        config,
        k,
        n_root: samples.len() as f64,
        rng,
        feat_buf: (0..p).collect(),
        feat_pick: Vec::with_capacity(k),
        scratch: Vec::with_capacity(samples.len()),
        importance: vec![0.0; p],
    };
    let root = builder.grow(samples, 0);
    (root, builder.importance)
}

/// Column-major copy of a feature matrix.
pub fn to_columns(x: &ArrayView2<f64>) -> Vec<Vec<f64>> {
    (0..x.ncols()).map(|j| x.column(j).to_vec()).collect()
}

/// Train an ensemble. Trees may build in parallel; the result is
/// identical for any thread count.
pub fn fit_forest(x: &ArrayView2<f64>, y: &[u8], config: &RfConfig) -> Result<Forest> {
    config.validate()?;
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::LengthMismatch(n, y.len()));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == n {
        return Err(Error::NoClassVariation);
    }
    let cols = to_columns(x);
    let index = index_columns(&cols);
    let grown: Vec<(TreeNode, Vec<f64>)> = map_indexed(config.n_trees, |t| {
        let (samples, rng) = bootstrap_indices(config.seed, t, n);
        grow_tree_indexed(&index, y, samples, config, rng)
    });
    let p = cols.len();
    let mut raw_importance = vec![0.0; p];
    let mut trees = Vec::with_capacity(config.n_trees);
    for (tree, imp) in grown {
        for j in 0..p {
            raw_importance[j] += imp[j];
        }
        trees.push(tree);
    }
    for v in raw_importance.iter_mut() {
        *v /= config.n_trees as f64;
    }
    Ok(Forest {
        trees,
        config: config.clone(),
        n_features: p,
        raw_importance,
    })
}

/// Ensemble probabilities for each row of `x`.
pub fn predict_proba(forest: &Forest, x: &ArrayView2<f64>) -> Vec<f64> {
    let n = x.nrows();
    let t = forest.trees.len() as f64;
    map_indexed(n, |i| {
        let row = |j: usize| x[[i, j]];
        match forest.config.aggregation {
            Aggregation::MeanProbability => {
                forest.trees.iter().map(|tree| tree.predict(row)).sum::<f64>() / t
            }
            Aggregation::HardVote => {
                forest
                    .trees
                    .iter()
                    .filter(|tree| tree.predict(row) >= 0.5)
                    .count() as f64
                    / t
            }
        }
    })
}

/// Mean-decrease-in-impurity feature importance, normalized to sum 1.
pub fn importance(forest: &Forest) -> Result<Vec<f64>> {
    let total: f64 = forest.raw_importance.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoSplits);
    }
    Ok(forest.raw_importance.iter().map(|v| v / total).collect())
}

/// Error criterion for forest tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneCriterion {
    /// Mean CV misclassification rate (default).
    Misclassification,
    /// Mean CV binomial deviance.
    Deviance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneReport {
    /// (mtry_fraction, max_depth, mean CV error) per stage-1 grid point.
    pub stage1: Vec<(f64, Option<usize>, f64)>,
    /// (mtry_fraction, mean CV error) per stage-2 grid point.
    pub stage2: Vec<(f64, f64)>,
}

pub fn default_mtry_grid(p: usize) -> Vec<f64> {
    let sqrt_frac = (p as f64).sqrt() / p as f64;
    vec![0.05, 0.1, 0.2, sqrt_frac, 1.0 / 3.0, 0.5, 1.0]
}

pub fn default_depth_grid() -> Vec<Option<usize>> {
    vec![Some(2), Some(4), Some(8), Some(16), None]
}

fn cv_error(
    x: &ArrayView2<f64>,
    y: &[u8],
    folds: &[Vec<usize>],
    config: &RfConfig,
    criterion: TuneCriterion,
) -> Result<f64> {
    let n = x.nrows();
    let fold_errs = try_map_indexed(folds.len(), |f| -> Result<f64> {
        let val_rows = &folds[f];
        let train_rows = fold_complement(folds, f, n);
        let x_train = ndarray::Array2::from_shape_fn((train_rows.len(), x.ncols()), |(i, j)| {
            x[[train_rows[i], j]]
        });
        let y_train: Vec<u8> = train_rows.iter().map(|&i| y[i]).collect();
        let forest = fit_forest(&x_train.view(), &y_train, config)?;
        let x_val = ndarray::Array2::from_shape_fn((val_rows.len(), x.ncols()), |(i, j)| {
            x[[val_rows[i], j]]
        });
        let probs = predict_proba(&forest, &x_val.view());
        let err = match criterion {
            TuneCriterion::Misclassification => {
                probs
                    .iter()
                    .zip(val_rows.iter().map(|&i| y[i]))
                    .filter(|&(&p, yi)| (p >= 0.5) != (yi == 1))
                    .count() as f64
                    / val_rows.len() as f64
            }
            TuneCriterion::Deviance => {
                probs
                    .iter()
                    .zip(val_rows.iter().map(|&i| y[i]))
                    .map(|(&p, yi)| {
                        let mu = p.clamp(1e-12, 1.0 - 1e-12);
                        -2.0 * (f64::from(yi) * mu.ln()
                            + (1.0 - f64::from(yi)) * (1.0 - mu).ln())
                    })
                    .sum::<f64>()
                    / val_rows.len() as f64
            }
        };
        Ok(err)
    })?;
    Ok(fold_errs.iter().sum::<f64>() / folds.len() as f64)
}

/// Two-stage hyperparameter search.
///
/// Stage 1 cross-validates the full (mtry x depth) grid at a reduced tree
/// count and reports the error surface. Stage 2 re-cross-validates mtry
/// alone with unlimited depth; its argmin (ties to the smaller fraction)
/// becomes the returned config, with the full tree count restored.
#[allow(clippy::too_many_arguments)]
pub fn tune_two_stage(
    x: &ArrayView2<f64>,
    y: &[u8],
    mtry_grid: &[f64],
    depth_grid: &[Option<usize>],
    n_folds: usize,
    seed: u64,
    tune_trees: usize,
    base: &RfConfig,
    criterion: TuneCriterion,
) -> Result<(RfConfig, TuneReport)> {
    if mtry_grid.is_empty() || depth_grid.is_empty() {
        return Err(Error::GridEmpty);
    }
    let n = x.nrows();
    let folds = kfold_indices(n, n_folds, derive_seed(seed, Stream::ForestTuneFolds, 0))?;

    let mut stage1 = Vec::with_capacity(mtry_grid.len() * depth_grid.len());
    let mut combo = 0u64;
    for &mtry in mtry_grid {
        for &depth in depth_grid {
            let config = RfConfig {
                n_trees: tune_trees,
                mtry_fraction: mtry,
                max_depth: depth,
                min_leaf: base.min_leaf,
                seed: derive_seed(seed, Stream::ForestTuneFit, combo),
                aggregation: base.aggregation,
            };
            stage1.push((mtry, depth, cv_error(x, y, &folds, &config, criterion)?));
            combo += 1;
        }
    }

    let mut stage2 = Vec::with_capacity(mtry_grid.len());
    for &mtry in mtry_grid {
        let config = RfConfig {
            n_trees: tune_trees,
            mtry_fraction: mtry,
            max_depth: None,
            min_leaf: base.min_leaf,
            seed: derive_seed(seed, Stream::ForestTuneFit, combo),
            aggregation: base.aggregation,
        };
        stage2.push((mtry, cv_error(x, y, &folds, &config, criterion)?));
        combo += 1;
    }

    // Argmin over stage 2; ascending scan with strict improvement keeps
    // the smaller fraction on ties.
    let mut order: Vec<usize> = (0..stage2.len()).collect();
    order.sort_by(|&a, &b| stage2[a].0.total_cmp(&stage2[b].0));
    let mut best = order[0];
    for &i in &order {
        if stage2[i].1 < stage2[best].1 {
            best = i;
        }
    }
    let chosen = RfConfig {
        n_trees: base.n_trees,
        mtry_fraction: stage2[best].0,
        max_depth: None,
        min_leaf: base.min_leaf,
        seed: base.seed,
        aggregation: base.aggregation,
    };
    Ok((chosen, TuneReport { stage1, stage2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn columns(data: &[(&[f64], u8)]) -> (Vec<Vec<f64>>, Vec<u8>) {
        let p = data[0].0.len();
        let mut cols = vec![Vec::new(); p];
        let mut y = Vec::new();
        for (row, label) in data {
            for (j, &v) in row.iter().enumerate() {
                cols[j].push(v);
            }
            y.push(*label);
        }
        (cols, y)
    }

    #[test]
    fn gini_known_values() {
        assert_eq!(gini(5, 5).unwrap(), 0.5);
        assert_eq!(gini(10, 0).unwrap(), 0.0);
        assert!((gini(7, 3).unwrap() - 0.42).abs() < 1e-15);
        assert!(matches!(gini(0, 0), Err(Error::EmptyNode)));
    }

    #[test]
    fn gini_bounds_property() {
        for pos in 0..30usize {
            for neg in 0..30usize {
                if pos + neg == 0 {
                    continue;
                }
                let g = gini(pos, neg).unwrap();
                assert!((0.0..=0.5).contains(&g));
                assert_eq!(g == 0.0, pos == 0 || neg == 0);
            }
        }
    }

    #[test]
    fn best_split_separable_example() {
        let (cols, y) = columns(&[
            (&[1.0], 0),
            (&[2.0], 0),
            (&[8.0], 1),
            (&[9.0], 1),
        ]);
        let samples: Vec<u32> = vec![0, 1, 2, 3];
        let mut scratch = Vec::new();
        let split = best_split(&cols, &y, &samples, &[0], 1, &mut scratch).unwrap();
        assert_eq!(split.feature, 0);
        assert_eq!(split.threshold, 5.0);
        assert!((split.decrease - 0.5).abs() < 1e-15);
    }

    #[test]
    fn best_split_none_on_pure_or_constant() {
        let (cols, y) = columns(&[(&[1.0], 1), (&[2.0], 1), (&[3.0], 1)]);
        let mut scratch = Vec::new();
        assert!(best_split(&cols, &y, &[0, 1, 2], &[0], 1, &mut scratch).is_none());

        let (cols, y) = columns(&[(&[4.0], 0), (&[4.0], 1), (&[4.0], 0)]);
        assert!(best_split(&cols, &y, &[0, 1, 2], &[0], 1, &mut scratch).is_none());
    }

    /// Exhaustive scan over every (feature, midpoint) pair.
    fn oracle_split(
        cols: &[Vec<f64>],
        y: &[u8],
        samples: &[u32],
        features: &[usize],
        min_leaf: usize,
    ) -> Option<SplitCandidate> {
        let n = samples.len();
        let pos_total = samples.iter().filter(|&&i| y[i as usize] == 1).count();
        let neg_total = n - pos_total;
        if pos_total == 0 || neg_total == 0 || n < 2 {
            return None;
        }
        let parent = gini(pos_total, neg_total).unwrap();
        let mut best: Option<SplitCandidate> = None;
        for &feature in features {
            let mut values: Vec<f64> = samples
                .iter()
                .map(|&i| cols[feature][i as usize])
                .collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for w in values.windows(2) {
                let threshold = 0.5 * (w[0] + w[1]);
                let threshold = if threshold >= w[1] { w[0] } else { threshold };
                let mut lp = 0;
                let mut ln = 0;
                for &i in samples {
                    if cols[feature][i as usize] <= threshold {
                        if y[i as usize] == 1 {
                            lp += 1;
                        } else {
                            ln += 1;
                        }
                    }
                }
                let nl = lp + ln;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let weighted = (nl as f64 * gini(lp, ln).unwrap()
                    + nr as f64 * gini(pos_total - lp, neg_total - ln).unwrap())
                    / n as f64;
                let decrease = parent - weighted;
                if decrease > 1e-12 && best.is_none_or(|b| decrease > b.decrease) {
                    best = Some(SplitCandidate {
                        feature,
                        threshold,
                        decrease,
                    });
                }
            }
        }
        best
    }

    #[test]
    fn best_split_matches_exhaustive_scan() {
        use crate::rng::{stream_rng, Stream};
        use rand::Rng;
        let mut rng = stream_rng(61, Stream::Synth, 0);
        let mut scratch = Vec::new();
        for case in 0..40 {
            let n = rng.random_range(4..50);
            let p = rng.random_range(1..6);
            // Coarse values force duplicates.
            let cols: Vec<Vec<f64>> = (0..p)
                .map(|_| (0..n).map(|_| rng.random_range(0..8) as f64).collect())
                .collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let samples: Vec<u32> = (0..n as u32).collect();
            let features: Vec<usize> = (0..p).collect();
            let min_leaf = rng.random_range(1..3);
            let fast = best_split(&cols, &y, &samples, &features, min_leaf, &mut scratch);
            let slow = oracle_split(&cols, &y, &samples, &features, min_leaf);
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.feature, b.feature, "case {case}");
                    assert_eq!(a.threshold, b.threshold, "case {case}");
                    assert!((a.decrease - b.decrease).abs() < 1e-14, "case {case}");
                }
                (a, b) => panic!("case {case}: fast {a:?} vs oracle {b:?}"),
            }
        }
    }

    #[test]
    fn ranked_split_matches_value_split() {
        use crate::rng::{stream_rng, Stream};
        use rand::Rng;
        let mut rng = stream_rng(67, Stream::Synth, 0);
        let mut scratch_pairs = Vec::new();
        let mut scratch_codes = Vec::new();
        for case in 0..50 {
            let n = rng.random_range(4..80);
            let p = rng.random_range(1..6);
            let cols: Vec<Vec<f64>> = (0..p)
                .map(|_| (0..n).map(|_| rng.random_range(0..10) as f64 / 3.0).collect())
                .collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            // Bootstrap-like multiset: duplicates and value gaps, so the
            // rank path must use sample-local distinct values.
            let samples: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
            let features: Vec<usize> = (0..p).collect();
            let min_leaf = rng.random_range(1..3);
            let plain = best_split(&cols, &y, &samples, &features, min_leaf, &mut scratch_pairs);
            let index = index_columns(&cols);
            let ranked =
                best_split_ranked(&index, &y, &samples, &features, min_leaf, &mut scratch_codes);
            match (plain, ranked) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.feature, b.feature, "case {case}");
                    assert_eq!(a.threshold, b.threshold, "case {case}");
                    assert_eq!(a.decrease, b.decrease, "case {case}");
                }
                (a, b) => panic!("case {case}: plain {a:?} vs ranked {b:?}"),
            }
        }
    }

    fn separable_matrix() -> (Array2<f64>, Vec<u8>) {
        let x = ndarray::array![[1.0], [2.0], [1.5], [8.0], [9.0], [8.5]];
        let y = vec![0, 0, 0, 1, 1, 1];
        (x, y)
    }

    #[test]
    fn single_tree_on_separable_data_is_exact() {
        let (x, y) = separable_matrix();
        let config = RfConfig {
            n_trees: 1,
            mtry_fraction: 1.0,
            seed: 4,
            ..Default::default()
        };
        let forest = fit_forest(&x.view(), &y, &config).unwrap();
        let probs = predict_proba(&forest, &x.view());
        for (p, &yi) in probs.iter().zip(&y) {
            assert_eq!(*p, f64::from(yi));
        }
    }

    #[test]
    fn depth_zero_gives_prevalence_leaf() {
        let (x, y) = separable_matrix();
        let config = RfConfig {
            n_trees: 1,
            mtry_fraction: 1.0,
            max_depth: Some(0),
            seed: 0,
            ..Default::default()
        };
        let forest = fit_forest(&x.view(), &y, &config).unwrap();
        match &forest.trees[0] {
            TreeNode::Leaf { probability, samples } => {
                assert_eq!(*samples, 6);
                // Bootstrap prevalence, not necessarily 0.5.
                assert!(*probability > 0.0 && *probability < 1.0);
            }
            other => panic!("expected leaf, got {other:?}"),
        }
    }

    #[test]
    fn identical_seeds_grow_identical_trees() {
        let (x, y) = separable_matrix();
        let cols = to_columns(&x.view());
        let config = RfConfig { mtry_fraction: 1.0, seed: 9, ..Default::default() };
        let (samples_a, rng_a) = bootstrap_indices(9, 3, 6);
        let (samples_b, rng_b) = bootstrap_indices(9, 3, 6);
        assert_eq!(samples_a, samples_b);
        let (tree_a, imp_a) = grow_tree(&cols, &y, samples_a, &config, rng_a);
        let (tree_b, imp_b) = grow_tree(&cols, &y, samples_b, &config, rng_b);
        assert_eq!(tree_a, tree_b);
        assert_eq!(imp_a, imp_b);
    }

    #[test]
    fn forest_fit_is_reproducible() {
        use crate::rng::{stream_rng, Stream};
        use rand::Rng;
        let mut rng = stream_rng(62, Stream::Synth, 0);
        let x = Array2::from_shape_fn((60, 5), |_| rng.random_range(-1.0..1.0f64));
        let y: Vec<u8> = (0..60)
            .map(|i| u8::from(x[[i, 2]] + 0.3 * rng.random_range(-1.0..1.0) > 0.0))
            .collect();
        let config = RfConfig { n_trees: 30, seed: 5, ..Default::default() };
        let a = fit_forest(&x.view(), &y, &config).unwrap();
        let b = fit_forest(&x.view(), &y, &config).unwrap();
        let pa = predict_proba(&a, &x.view());
        let pb = predict_proba(&b, &x.view());
        let bits = |v: &[f64]| v.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&pa), bits(&pb));
        assert_eq!(a.raw_importance, b.raw_importance);
    }

    #[test]
    fn bootstrap_unique_fraction_near_632() {
        let n = 500;
        let mut total = 0.0;
        let trees = 200;
        for t in 0..trees {
            let (samples, _) = bootstrap_indices(17, t, n);
            let unique: std::collections::HashSet<u32> = samples.into_iter().collect();
            total += unique.len() as f64 / n as f64;
        }
        let mean = total / trees as f64;
        assert!(
            (mean - (1.0 - 1.0 / std::f64::consts::E)).abs() < 0.02,
            "unique fraction {mean}"
        );
    }

    #[test]
    fn importance_finds_the_signal_feature() {
        use crate::rng::{stream_rng, Stream};
        use rand::Rng;
        let mut rng = stream_rng(63, Stream::Synth, 0);
        let n = 200;
        let x = Array2::from_shape_fn((n, 6), |_| rng.random_range(-1.0..1.0f64));
        let y: Vec<u8> = (0..n).map(|i| u8::from(x[[i, 3]] > 0.0)).collect();
        let config = RfConfig {
            n_trees: 50,
            mtry_fraction: 0.5,
            seed: 21,
            ..Default::default()
        };
        let forest = fit_forest(&x.view(), &y, &config).unwrap();
        let imp = importance(&forest).unwrap();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let argmax = imp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 3);
        assert!(imp[3] > 0.5);
    }

    #[test]
    fn stump_forest_importance_is_concentrated() {
        let (x, y) = separable_matrix();
        let config = RfConfig {
            n_trees: 3,
            mtry_fraction: 1.0,
            max_depth: Some(1),
            seed: 2,
            ..Default::default()
        };
        let forest = fit_forest(&x.view(), &y, &config).unwrap();
        let imp = importance(&forest).unwrap();
        assert_eq!(imp, vec![1.0]);
    }

    #[test]
    fn no_splits_importance_errors() {
        let (x, y) = separable_matrix();
        let config = RfConfig {
            n_trees: 2,
            mtry_fraction: 1.0,
            max_depth: Some(0),
            seed: 0,
            ..Default::default()
        };
        let forest = fit_forest(&x.view(), &y, &config).unwrap();
        assert!(matches!(importance(&forest), Err(Error::NoSplits)));
    }

    #[test]
    fn ensemble_variance_shrinks_with_more_trees() {
        use crate::rng::{stream_rng, Stream};
        use rand::Rng;
        let mut rng = stream_rng(64, Stream::Synth, 0);
        let n = 80;
        let x = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0f64));
        let y: Vec<u8> = (0..n)
            .map(|i| u8::from(x[[i, 0]] + 0.8 * rng.random_range(-1.0..1.0) > 0.0))
            .collect();
        let mean_var = |n_trees: usize| -> f64 {
            let replicates: Vec<Vec<f64>> = (0..6)
                .map(|s| {
                    let config = RfConfig {
                        n_trees,
                        mtry_fraction: 0.5,
                        seed: 100 + s,
                        ..Default::default()
                    };
                    let forest = fit_forest(&x.view(), &y, &config).unwrap();
                    predict_proba(&forest, &x.view())
                })
                .collect();
            (0..n)
                .map(|i| {
                    let vals: Vec<f64> = replicates.iter().map(|r| r[i]).collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
                })
                .sum::<f64>()
                / n as f64
        };
        let var_small = mean_var(10);
        let var_large = mean_var(1000);
        assert!(
            var_large < var_small,
            "variance should shrink: {var_small} -> {var_large}"
        );
    }

    #[test]
    fn tune_single_point_grid_returns_it() {
        let (x, y) = separable_matrix();
        // Replicate rows so folds keep both classes.
        let xr = Array2::from_shape_fn((24, 1), |(i, j)| x[[i % 6, j]]);
        let yr: Vec<u8> = (0..24).map(|i| y[i % 6]).collect();
        let base = RfConfig { n_trees: 500, ..Default::default() };
        let (chosen, report) = tune_two_stage(
            &xr.view(),
            &yr,
            &[0.7],
            &[Some(2)],
            3,
            11,
            20,
            &base,
            TuneCriterion::Misclassification,
        )
        .unwrap();
        assert_eq!(chosen.mtry_fraction, 0.7);
        assert_eq!(chosen.max_depth, None);
        assert_eq!(chosen.n_trees, 500);
        assert_eq!(report.stage1.len(), 1);
        assert_eq!(report.stage2.len(), 1);
    }

    #[test]
    fn tune_selects_stage2_argmin() {
        use crate::rng::{stream_rng, Stream};
        use rand::Rng;
        let mut rng = stream_rng(65, Stream::Synth, 0);
        let n = 150;
        let x = Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0f64));
        let y: Vec<u8> = (0..n)
            .map(|i| u8::from(x[[i, 1]] - x[[i, 4]] + 0.5 * rng.random_range(-1.0..1.0) > 0.0))
            .collect();
        let base = RfConfig::default();
        let (chosen, report) = tune_two_stage(
            &x.view(),
            &y,
            &[0.2, 0.6, 1.0],
            &[Some(4), None],
            3,
            13,
            40,
            &base,
            TuneCriterion::Misclassification,
        )
        .unwrap();
        let chosen_err = report
            .stage2
            .iter()
            .find(|(m, _)| *m == chosen.mtry_fraction)
            .unwrap()
            .1;
        for &(_, err) in &report.stage2 {
            assert!(chosen_err <= err);
        }
        assert_eq!(report.stage1.len(), 6);
    }

    #[test]
    fn interaction_data_wants_larger_mtry() {
        use crate::rng::{stream_rng, Stream};
        use rand::Rng;
        let mut rng = stream_rng(66, Stream::Synth, 0);
        let n = 500;
        let p = 10;
        // Interaction with sign reversal: the effect of x1 flips with x0,
        // but imbalanced marginals keep both features greedily visible.
        // With mtry = 1/p most node subsets are one of the eight noise
        // columns, which hides the pair; the full fraction sees it.
        let x = Array2::from_shape_fn((n, p), |(_, j)| match j {
            0 => f64::from(rng.random_range(0.0..1.0) < 0.7),
            1 => f64::from(rng.random_range(0.0..1.0) < 0.3),
            _ => rng.random_range(-1.0..1.0),
        });
        let y: Vec<u8> = (0..n)
            .map(|i| {
                let xor = x[[i, 0]] != x[[i, 1]];
                let p_one = if xor { 0.9 } else { 0.1 };
                u8::from(rng.random_range(0.0..1.0) < p_one)
            })
            .collect();
        let base = RfConfig::default();
        let (chosen, _) = tune_two_stage(
            &x.view(),
            &y,
            &[1.0 / p as f64, 1.0],
            &[None],
            3,
            15,
            60,
            &base,
            TuneCriterion::Misclassification,
        )
        .unwrap();
        assert!(
            chosen.mtry_fraction > 1.0 / p as f64,
            "expected the larger fraction, got {}",
            chosen.mtry_fraction
        );
    }

    #[test]
    fn empty_grid_and_one_class_errors() {
        let (x, y) = separable_matrix();
        let base = RfConfig::default();
        assert!(matches!(
            tune_two_stage(
                &x.view(),
                &y,
                &[],
                &[None],
                2,
                0,
                10,
                &base,
                TuneCriterion::Misclassification
            ),
            Err(Error::GridEmpty)
        ));
        let config = RfConfig { n_trees: 5, ..Default::default() };
        assert!(matches!(
            fit_forest(&x.view(), &[1, 1, 1, 1, 1, 1], &config),
            Err(Error::NoClassVariation)
        ));
    }
}
