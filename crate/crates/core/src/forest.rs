//! Bagged regression forests with variance-reduction splits.
//!
//! Training rows are put into a canonical order before bagging, and tree `k`
//! draws from substream `k` of the configured seed, so a fitted forest
//! depends only on the multiset of training rows and the seed.

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeaturesPerSplit {
    #[default]
    All,
    Sqrt,
    Third,
}

impl FeaturesPerSplit {
    fn count(self, k: usize) -> usize {
        match self {
            FeaturesPerSplit::All => k,
            FeaturesPerSplit::Sqrt => ((k as f64).sqrt().round() as usize).clamp(1, k),
            FeaturesPerSplit::Third => (k / 3).clamp(1, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    #[serde(default)]
    pub features_per_split: FeaturesPerSplit,
    /// Resample rows with replacement per tree.
    #[serde(default = "yes")]
    pub bootstrap: bool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 15,
            min_leaf: 5,
            features_per_split: FeaturesPerSplit::All,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return invalid("n_trees must be at least 1");
        }
        if self.max_depth == 0 {
            return invalid("max_depth must be at least 1");
        }
        if self.min_leaf == 0 {
            return invalid("min_leaf must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
}

impl Forest {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    /// Predictions for column-major features.
    pub fn predict(&self, columns: &[Vec<f64>]) -> Vec<f64> {
        let n = columns.first().map_or(0, Vec::len);
        let mut row = vec![0.0; columns.len()];
        (0..n)
            .map(|i| {
                for (r, c) in row.iter_mut().zip(columns) {
                    *r = c[i];
                }
                self.predict_row(&row)
            })
            .collect()
    }
}

/// Fits a forest on column-major features `x` and targets `y`.
pub fn fit_forest(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig) -> Result<Forest> {
    cfg.validate()?;
    let n = y.len();
    if n == 0 {
        return invalid("cannot fit a forest on zero rows");
    }
    if x.iter().any(|c| c.len() != n) {
        return invalid("feature columns and target differ in length");
    }
    if y.iter().chain(x.iter().flatten()).any(|v| !v.is_finite()) {
        return invalid("forest inputs must be finite");
    }
    let (x, y) = canonical_order(x, y);
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|k| grow_tree(&x, &y, cfg, k as u64))
        .collect();
    Ok(Forest {
        trees,
        n_features: x.len(),
    })
}

fn canonical_order(x: &[Vec<f64>], y: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| {
        x.iter()
            .map(|c| c[a].total_cmp(&c[b]))
            .chain(std::iter::once(y[a].total_cmp(&y[b])))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let xs = x.iter().map(|c| order.iter().map(|&i| c[i]).collect()).collect();
    let ys = order.iter().map(|&i| y[i]).collect();
    (xs, ys)
}

fn grow_tree(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig, index: u64) -> Tree {
    let mut rng = rng::substream(cfg.seed, index);
    let n = y.len();
    let rows: Vec<usize> = if cfg.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let k = x.len();
    let m = cfg.features_per_split.count(k.max(1));
    let mut nodes = Vec::new();
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    // (node slot, rows, depth)
    let mut stack = vec![(0usize, rows, 0usize)];
    nodes.push(Node::Leaf(0.0));
    while let Some((slot, rows, depth)) = stack.pop() {
        let sum: f64 = rows.iter().map(|&i| y[i]).sum();
        let count = rows.len() as f64;
        let mean = sum / count;
        let constant = rows.iter().all(|&i| y[i] == y[rows[0]]);
        if depth >= cfg.max_depth || rows.len() < 2 * cfg.min_leaf || constant || k == 0 {
            nodes[slot] = Node::Leaf(mean);
            continue;
        }
        let candidates: Vec<usize> = if m == k {
            (0..k).collect()
        } else {
            let mut f = sample(&mut rng, k, m).into_vec();
            f.sort_unstable();
            f
        };
        let parent_score = sum * sum / count;
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &candidates {
            pairs.clear();
            pairs.extend(rows.iter().map(|&i| (x[f][i], y[i])));
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[pairs.len() - 1].0 {
                continue;
            }
            let mut left_sum = 0.0;
            let total = pairs.len();
            for split in 1..total {
                left_sum += pairs[split - 1].1;
                if split < cfg.min_leaf || total - split < cfg.min_leaf {
                    continue;
                }
                if pairs[split - 1].0 == pairs[split].0 {
                    continue;
                }
                let nl = split as f64;
                let nr = (total - split) as f64;
                let right_sum = sum - left_sum;
                let score = left_sum * left_sum / nl + right_sum * right_sum / nr;
                if best.is_none_or(|(s, _, _)| score > s) {
                    let threshold = 0.5 * (pairs[split - 1].0 + pairs[split].0);
                    best = Some((score, f, threshold));
                }
            }
        }
        match best {
            Some((score, feature, threshold)) if score > parent_score * (1.0 + 1e-12) + 1e-12 => {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| x[feature][i] <= threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf(0.0));
                let right = nodes.len();
                nodes.push(Node::Leaf(0.0));
                nodes[slot] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
                stack.push((right, right_rows, depth + 1));
                stack.push((left, left_rows, depth + 1));
            }
            _ => nodes[slot] = Node::Leaf(mean),
        }
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_target_predicts_constant() {
        let x = vec![(0..50).map(f64::from).collect::<Vec<_>>()];
        let y = vec![4.25; 50];
        let f = fit_forest(&x, &y, &ForestConfig::default()).unwrap();
        assert!(f.predict(&x).iter().all(|&p| p == 4.25));
        assert!(f.predict(&[vec![1e6]]).iter().all(|&p| p == 4.25));
    }

    #[test]
    fn depth_one_stump_predicts_group_means() {
        // oracle: the only informative split separates x=0 from x=1, so the
        // two leaves hold the group means of y
        let x = vec![vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]];
        let y = vec![1.0, 2.0, 6.0, 10.0, 11.0, 12.0, 15.0];
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            bootstrap: false,
            ..ForestConfig::default()
        };
        let f = fit_forest(&x, &y, &cfg).unwrap();
        assert_eq!(f.predict_row(&[0.0]), 3.0);
        assert_eq!(f.predict_row(&[1.0]), 12.0);
        assert_eq!(f.max_depth(), 1);
    }

    fn noisy_data(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut r = rng::stream(seed);
        let a: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64).collect();
        let y = a
            .iter()
            .zip(&b)
            .map(|(a, b)| 3.0 * a + b * b + r.random::<f64>())
            .collect();
        (vec![a, b], y)
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let (x, y) = noisy_data(3, 300);
        let cfg = ForestConfig {
            n_trees: 20,
            seed: 11,
            features_per_split: FeaturesPerSplit::Sqrt,
            ..ForestConfig::default()
        };
        let a = fit_forest(&x, &y, &cfg).unwrap();
        let b = fit_forest(&x, &y, &cfg).unwrap();
        assert_eq!(a.predict(&x), b.predict(&x));

        let perm: Vec<usize> = (0..y.len()).rev().collect();
        let xp: Vec<Vec<f64>> = x.iter().map(|c| perm.iter().map(|&i| c[i]).collect()).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let c = fit_forest(&xp, &yp, &cfg).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn respects_depth_and_fits_signal() {
        let (x, y) = noisy_data(5, 2000);
        let cfg = ForestConfig {
            n_trees: 30,
            max_depth: 6,
            ..ForestConfig::default()
        };
        let f = fit_forest(&x, &y, &cfg).unwrap();
        assert!(f.max_depth() <= 6);
        let p = f.predict(&x);
        let mse = p.iter().zip(&y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / y.len() as f64;
        // noise variance is 1/12
        assert!(mse < 0.2, "mse {mse}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_forest(&[vec![]], &[], &ForestConfig::default()).is_err());
        let cfg = ForestConfig {
            n_trees: 0,
            ..ForestConfig::default()
        };
        assert!(fit_forest(&[vec![1.0]], &[1.0], &cfg).is_err());
    }

    #[test]
    fn featureless_input_gives_root_only_trees() {
        let x = vec![vec![2.0; 10]];
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        let f = fit_forest(
            &x,
            &y,
            &ForestConfig {
                bootstrap: false,
                ..ForestConfig::default()
            },
        )
        .unwrap();
        assert_eq!(f.max_depth(), 0);
        assert_eq!(f.predict_row(&[2.0]), 4.5);
    }
}
