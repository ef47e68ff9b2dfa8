//! Isolation forest over fixed-length feature vectors.
//!
//! Trees are grown on random subsamples by splitting a random attribute at
//! a uniform point strictly inside its range; anomalies isolate near the
//! root. Split values are held as `f32` so a forest written to disk scores
//! bit-identically after reloading.

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;

const EULER_GAMMA: f64 = 0.577_215_664_9;

/// Default subsample size ψ.
pub const DEFAULT_PSI: usize = 256;
/// Default number of trees.
pub const DEFAULT_TREES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum ITreeNode {
    Internal {
        split_attr: usize,
        split_value: f32,
        left: Box<ITreeNode>,
        right: Box<ITreeNode>,
    },
    External {
        size: usize,
    },
}

impl ITreeNode {
    pub fn depth(&self) -> usize {
        match self {
            ITreeNode::External { .. } => 0,
            ITreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Number of training points that reached the tree.
    pub fn size(&self) -> usize {
        match self {
            ITreeNode::External { size } => *size,
            ITreeNode::Internal { left, right, .. } => left.size() + right.size(),
        }
    }

    /// `(depth, size)` of every leaf, left to right.
    pub fn leaves(&self) -> Vec<(usize, usize)> {
        fn walk(n: &ITreeNode, d: usize, out: &mut Vec<(usize, usize)>) {
            match n {
                ITreeNode::External { size } => out.push((d, *size)),
                ITreeNode::Internal { left, right, .. } => {
                    walk(left, d + 1, out);
                    walk(right, d + 1, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(self, 0, &mut out);
        out
    }
}

/// Average path length of an unsuccessful BST search over `n` points.
pub fn avg_path_c(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

/// `⌈log₂ n⌉`, with 0 for `n ≤ 1`.
pub fn height_limit_for(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Smallest `f32` strictly above `v` and largest strictly below `hi`, if any
/// `f32` lies strictly inside `(v, hi)`.
fn f32_interior(lo: f64, hi: f64) -> Option<(f32, f32)> {
    let mut a = lo as f32;
    while a as f64 <= lo {
        a = a.next_up();
    }
    let mut b = hi as f32;
    while b as f64 >= hi {
        b = b.next_down();
    }
    ((a as f64) < hi && a <= b).then_some((a, b))
}

/// Grows one isolation tree over `points` (all the same dimension).
pub fn build_tree(points: &[&[f64]], height_limit: usize, rng: &mut seed::Rng) -> ITreeNode {
    let idx: Vec<usize> = (0..points.len()).collect();
    grow(points, idx, 0, height_limit, rng)
}

fn grow(points: &[&[f64]], idx: Vec<usize>, depth: usize, limit: usize, rng: &mut seed::Rng) -> ITreeNode {
    if depth >= limit || idx.len() <= 1 {
        return ITreeNode::External { size: idx.len() };
    }
    let dim = points[idx[0]].len();
    let candidates: Vec<(usize, f64, f64, f32, f32)> = (0..dim)
        .filter_map(|a| {
            let (lo, hi) = idx
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = points[i][a];
                    (lo.min(v), hi.max(v))
                });
            if !(hi > lo) {
                return None;
            }
            f32_interior(lo, hi).map(|(a32, b32)| (a, lo, hi, a32, b32))
        })
        .collect();
    if candidates.is_empty() {
        return ITreeNode::External { size: idx.len() };
    }
    let (attr, lo, hi, first, last) = candidates[rng.random_range(0..candidates.len())];
    let u = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let split = ((lo + u * (hi - lo)) as f32).clamp(first, last);
    let (left, right): (Vec<usize>, Vec<usize>) =
        idx.into_iter().partition(|&i| points[i][attr] < split as f64);
    ITreeNode::Internal {
        split_attr: attr,
        split_value: split,
        left: Box::new(grow(points, left, depth + 1, limit, rng)),
        right: Box::new(grow(points, right, depth + 1, limit, rng)),
    }
}

/// Edges from the root to the leaf reached by `x`, plus `c(leaf size)`.
pub fn path_length(tree: &ITreeNode, x: &[f64]) -> f64 {
    let mut node = tree;
    let mut edges = 0usize;
    loop {
        match node {
            ITreeNode::External { size } => return edges as f64 + avg_path_c(*size),
            ITreeNode::Internal {
                split_attr,
                split_value,
                left,
                right,
            } => {
                node = if x[*split_attr] < *split_value as f64 {
                    left
                } else {
                    right
                };
                edges += 1;
            }
        }
    }
}

/// `2^(−E(h) / c(ψ))`; a forest grown on a single point has no scale and
/// scores everything 0.5.
pub fn score_from_mean_path(mean_path: f64, psi: usize) -> f64 {
    let c = avg_path_c(psi);
    if c == 0.0 {
        0.5
    } else {
        (-mean_path / c).exp2()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    pub trees: Vec<ITreeNode>,
    /// Subsample size each tree was grown on, `min(ψ, |data|)`.
    pub psi: usize,
    pub height_limit: usize,
    pub seed: u64,
    pub n_features: usize,
}

impl IsolationForest {
    /// Grows `t` trees on independent subsamples of size `min(psi, n)`,
    /// each from its own `(seed, tree index)` stream.
    pub fn fit(data: &[Vec<f64>], psi: usize, t: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("isolation forest needs at least one point"));
        }
        if psi < 2 {
            return Err(Error::contract(format!("psi must be at least 2, got {psi}")));
        }
        if t == 0 {
            return Err(Error::contract("forest needs at least one tree"));
        }
        let n_features = data[0].len();
        if n_features == 0 {
            return Err(Error::contract("feature vectors must be non-empty"));
        }
        if let Some(row) = data.iter().position(|r| r.len() != n_features) {
            return Err(Error::contract(format!(
                "row {row} has {} features, expected {n_features}",
                data[row].len()
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite feature value"));
        }
        let sample = psi.min(data.len());
        let height_limit = height_limit_for(sample);
        let trees = (0..t)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::derived_rng(seed, 0x6966_6f72, i as u64);
                let picked = index::sample(&mut rng, data.len(), sample);
                let points: Vec<&[f64]> = picked.iter().map(|j| data[j].as_slice()).collect();
                build_tree(&points, height_limit, &mut rng)
            })
            .collect();
        Ok(Self {
            trees,
            psi: sample,
            height_limit,
            seed,
            n_features,
        })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::contract(format!(
                "feature vector has {} values, forest expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    pub fn mean_path_length(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.trees.iter().map(|t| path_length(t, x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Anomaly score in `(0, 1)`; higher is more isolated.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(score_from_mean_path(self.mean_path_length(x)?, self.psi))
    }

    pub fn score_all(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.score(x)).collect()
    }
}

/// Scores flagged by [`threshold_by_fraction`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Lowest flagged score (`+∞` when nothing is flagged).
    pub threshold: f64,
    pub flags: Vec<bool>,
}

impl Detection {
    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// `⌈fraction · n⌉`, treating products within rounding noise of an integer
/// as that integer (0.04 × 1000 is 40, not 41).
pub fn flagged_count(fraction: f64, n: usize) -> usize {
    let prod = fraction * n as f64;
    let nearest = prod.round();
    if (prod - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        prod.ceil() as usize
    }
}

/// Flags the `⌈fraction · n⌉` highest scores; ties go to the earlier index.
pub fn threshold_by_fraction(scores: &[f64], fraction: f64) -> Result<Detection> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let k = flagged_count(fraction, scores.len()).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flags = vec![false; scores.len()];
    for &i in &order[..k] {
        flags[i] = true;
    }
    let threshold = order[..k].last().map(|&i| scores[i]).unwrap_or(f64::INFINITY);
    Ok(Detection { threshold, flags })
}
