//! Isolation Forest over feature vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { size: usize },
    Split { feature: usize, value: f64, left: usize, right: usize },
}

/// A tree is a node arena rooted at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub trees: Vec<Tree>,
    /// Subsample size per tree.
    pub m: usize,
    pub height_limit: usize,
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// `c(n) = 2H(n−1) − 2(n−1)/n`, the mean unsuccessful-search path length of
/// a binary search tree on `n` keys; zero for `n ≤ 1`.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    2.0 * harmonic(n - 1) - 2.0 * (n - 1) as f64 / n as f64
}

impl Tree {
    fn grow(points: &[&[f64]], height_limit: usize, rng: &mut RngStream) -> Self {
        let mut tree = Tree { nodes: Vec::new() };
        tree.build(points.to_vec(), 0, height_limit, rng);
        tree
    }

    fn build(&mut self, points: Vec<&[f64]>, depth: usize, limit: usize, rng: &mut RngStream) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: points.len() });
        if depth >= limit || points.len() <= 1 {
            return id;
        }
        let dim = points[0].len();
        let feature = rng.below(dim);
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[feature]), hi.max(p[feature])));
        if lo >= hi {
            return id;
        }
        let value = rng.uniform(lo, hi);
        let (l, r): (Vec<&[f64]>, Vec<&[f64]>) = points.into_iter().partition(|p| p[feature] < value);
        let left = self.build(l, depth + 1, limit, rng);
        let right = self.build(r, depth + 1, limit, rng);
        self.nodes[id] = Node::Split {
            feature,
            value,
            left,
            right,
        };
        id
    }

    /// Depth of the leaf reached by `x` plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut id = 0;
        let mut depth = 0;
        loop {
            match self.nodes[id] {
                Node::Leaf { size } => return depth as f64 + average_path_length(size),
                Node::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    id = if x[feature] < value { left } else { right };
                    depth += 1;
                }
            }
        }
    }
}

impl IsolationForest {
    /// Fits `n_trees` trees, each on a subsample of `m` rows without replacement.
    pub fn fit(features: &[Vec<f64>], n_trees: usize, m: usize, rng: &mut RngStream) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("isolation forest subsample size must be >= 2 (got {m})")));
        }
        if m > features.len() {
            return Err(Error::Config(format!(
                "subsample size {m} exceeds the {} available rows",
                features.len()
            )));
        }
        if n_trees == 0 {
            return Err(Error::Config("isolation forest needs at least one tree".into()));
        }
        let height_limit = (m as f64).log2().ceil() as usize;
        let trees = (0..n_trees)
            .map(|_| {
                let idx = rng.choose_distinct(features.len(), m);
                let pts: Vec<&[f64]> = idx.iter().map(|&i| features[i].as_slice()).collect();
                Tree::grow(&pts, height_limit, rng)
            })
            .collect();
        Ok(Self { trees, m, height_limit })
    }

    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// `2^{−E(h(x))/c(m)}` in (0, 1); near 1 means anomalous.
    pub fn score(&self, x: &[f64]) -> f64 {
        2f64.powf(-self.mean_path_length(x) / average_path_length(self.m))
    }

    /// Mean per-sample score of a set of rows.
    pub fn score_set(&self, rows: &[Vec<f64>]) -> f64 {
        rows.iter().map(|r| self.score(r)).sum::<f64>() / rows.len().max(1) as f64
    }
}
