//! Bagged CART regression forest with variance-criterion splits, plus the
//! two importance readings: normalized impurity decrease (FIMP) and
//! permutation importance (PIMP, mean MSE increase over repeats).
//!
//! Every tree is reproducible from `(seed, tree index)`: bootstrap indices,
//! feature subsampling and nothing else consume randomness, in a fixed
//! order. Split ties keep the first candidate in feature-sample order, then
//! the lower threshold, so fits are bit-stable.

use crate::attribution::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::numerics::rng::derive_seed;
use crate::numerics::SeededRng;
use alloc::vec;
use alloc::vec::Vec;

/// Anything that maps a feature vector to a real prediction.
pub trait Regressor {
    fn predict(&self, x: &[f64]) -> f64;
}

/// Forest hyperparameters. `mtry = None` means the regression default
/// `ceil(p / 3)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RfParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub mtry: Option<usize>,
    pub bootstrap: bool,
}

impl Default for RfParams {
    fn default() -> Self {
        RfParams { n_trees: 500, max_depth: None, min_leaf: 1, mtry: None, bootstrap: true }
    }
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct Tree {
    nodes: Vec<Node>,
    /// Raw impurity decrease (SSE reduction) accumulated per feature.
    impurity_decrease: Vec<f64>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }
}

/// Fitted forest; predictions are the mean over trees.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RfModel {
    trees: Vec<Tree>,
    pub params: RfParams,
    pub seed: u64,
    pub n_features: usize,
}

impl Regressor for RfModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }
}

impl RfModel {
    /// Total split count across the forest.
    pub fn total_splits(&self) -> usize {
        self.trees.iter().map(|t| t.n_splits()).sum()
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    mtry: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    rng: SeededRng,
    nodes: Vec<Node>,
    impurity_decrease: Vec<f64>,
}

fn sse(y: &[f64], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    idx.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum()
}

impl TreeBuilder<'_> {
    fn build(&mut self, samples: Vec<usize>, depth: usize) -> usize {
        let n = samples.len();
        let node_sse = sse(self.y, &samples);
        let mean = samples.iter().map(|&i| self.y[i]).sum::<f64>() / n as f64;
        let depth_done = self.max_depth.is_some_and(|d| depth >= d);
        if n < 2 * self.min_leaf || node_sse <= 1e-12 || depth_done {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        }

        // sample candidate features without replacement
        let p = self.x[0].len();
        let mut features: Vec<usize> = (0..p).collect();
        self.rng.shuffle(&mut features);
        features.truncate(self.mtry);

        let mut best: Option<(f64, usize, f64)> = None; // (child sse, feature, threshold)
        for &feat in &features {
            let mut order: Vec<usize> = samples.clone();
            order.sort_by(|&a, &b| {
                self.x[a][feat]
                    .partial_cmp(&self.x[b][feat])
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            // prefix sums over the sorted order
            let values: Vec<f64> = order.iter().map(|&i| self.x[i][feat]).collect();
            let ys: Vec<f64> = order.iter().map(|&i| self.y[i]).collect();
            let mut sum_left = 0.0;
            let mut sq_left = 0.0;
            let total_sum: f64 = ys.iter().sum();
            let total_sq: f64 = ys.iter().map(|v| v * v).sum();
            for cut in 1..n {
                sum_left += ys[cut - 1];
                sq_left += ys[cut - 1] * ys[cut - 1];
                if values[cut - 1] == values[cut] {
                    continue; // not a valid threshold between equal values
                }
                if cut < self.min_leaf || n - cut < self.min_leaf {
                    continue;
                }
                let nl = cut as f64;
                let nr = (n - cut) as f64;
                let sse_left = sq_left - sum_left * sum_left / nl;
                let sum_right = total_sum - sum_left;
                let sse_right = (total_sq - sq_left) - sum_right * sum_right / nr;
                let child = sse_left + sse_right;
                let better = match best {
                    None => true,
                    Some((b, _, _)) => child < b - 1e-15,
                };
                if better {
                    best = Some((child, feat, 0.5 * (values[cut - 1] + values[cut])));
                }
            }
        }

        let Some((child_sse, feature, threshold)) = best else {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        };
        if node_sse - child_sse <= 1e-12 {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        }
        self.impurity_decrease[feature] += node_sse - child_sse;
        let (left_samples, right_samples): (Vec<usize>, Vec<usize>) =
            samples.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean }); // placeholder
        let left = self.build(left_samples, depth + 1);
        let right = self.build(right_samples, depth + 1);
        self.nodes[slot] = Node::Split { feature, threshold, left, right };
        slot
    }
}

/// Fit a forest on the design matrix's feature columns (intercept ignored).
pub fn fit_rf(dm: &DesignMatrix, params: &RfParams, seed: u64) -> Result<RfModel> {
    let x = dm.feature_rows();
    let y = &dm.y;
    let n = x.len();
    let p = dm.n_features();
    if n < 2 {
        return Err(Error::Dataset("forest needs at least two observations".into()));
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(Error::Config("n_trees and min_leaf must be positive".into()));
    }
    let mtry = params.mtry.unwrap_or_else(|| p.div_ceil(3)).min(p).max(1);
    let mut trees = Vec::with_capacity(params.n_trees);
    for tree_idx in 0..params.n_trees {
        let mut rng = SeededRng::new(derive_seed(seed, tree_idx as u64));
        let samples: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| rng.below(n as u64) as usize).collect()
        } else {
            (0..n).collect()
        };
        let mut builder = TreeBuilder {
            x: &x,
            y,
            mtry,
            min_leaf: params.min_leaf,
            max_depth: params.max_depth,
            rng,
            nodes: Vec::new(),
            impurity_decrease: vec![0.0; p],
        };
        builder.build(samples, 0);
        trees.push(Tree { nodes: builder.nodes, impurity_decrease: builder.impurity_decrease });
    }
    Ok(RfModel { trees, params: params.clone(), seed, n_features: p })
}

/// Impurity importance: per-feature SSE reduction summed over splits,
/// averaged over trees, normalized to sum one. A forest with no splits
/// returns all zeros (nothing to normalize).
pub fn impurity_importance(model: &RfModel) -> Vec<f64> {
    let p = model.n_features;
    let mut acc = vec![0.0; p];
    for tree in &model.trees {
        for (f, v) in tree.impurity_decrease.iter().enumerate() {
            acc[f] += v / model.trees.len() as f64;
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        for v in &mut acc {
            *v /= total;
        }
    }
    acc
}

/// Permutation importance: for each feature, the mean over repeats of
/// `MSE(permuted column) − MSE(baseline)` on the given data.
pub fn permutation_importance(
    model: &RfModel,
    dm: &DesignMatrix,
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if repeats == 0 {
        return Err(Error::Config("permutation importance needs at least one repeat".into()));
    }
    let x = dm.feature_rows();
    let y = &dm.y;
    let n = x.len();
    let mse = |rows: &[Vec<f64>]| -> f64 {
        rows.iter()
            .zip(y)
            .map(|(row, &target)| {
                let e = model.predict(row) - target;
                e * e
            })
            .sum::<f64>()
            / n as f64
    };
    let baseline = mse(&x);
    let mut out = Vec::with_capacity(model.n_features);
    for feat in 0..model.n_features {
        let mut total = 0.0;
        for rep in 0..repeats {
            let mut rng =
                SeededRng::new(derive_seed(seed, ((feat as u64) << 32) | rep as u64));
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let mut shuffled = x.clone();
            for (row, &src) in shuffled.iter_mut().zip(&perm) {
                row[feat] = x[src][feat];
            }
            total += mse(&shuffled) - baseline;
        }
        out.push(total / repeats as f64);
    }
    Ok(out)
}
