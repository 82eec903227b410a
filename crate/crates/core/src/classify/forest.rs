//! Bagged CART trees with Gini splits and per-split feature subsampling.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features examined per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    /// `None` grows every tree until its leaves are pure.
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_features: None,
            max_depth: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        /// Share of genuine training rows that reached this leaf.
        genuine_fraction: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_fraction(&self, x: ArrayView1<f64>) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { genuine_fraction } => return *genuine_fraction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn votes_genuine(&self, x: ArrayView1<f64>) -> bool {
        self.leaf_fraction(x) > 0.5
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub dim: usize,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    /// Fraction of trees voting genuine.
    pub fn score(&self, x: ArrayView1<f64>) -> f64 {
        let votes = self.trees.iter().filter(|t| t.votes_genuine(x)).count();
        votes as f64 / self.trees.len().max(1) as f64
    }
}

/// Gini impurity of a two-class node with `pos` positives out of `n`.
pub fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

/// Trees are grown independently; tree `k` draws from its own stream of the
/// generator seeded by `seed`, so the result does not depend on scheduling.
pub fn fit(x: ArrayView2<f64>, genuine: &[bool], params: &ForestParams, seed: u64) -> ForestModel {
    let d = x.ncols();
    let mtry = params
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d.max(1));
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            grow_tree(x, genuine, params, mtry, &mut rng)
        })
        .collect();
    ForestModel { dim: d, trees }
}

struct Pending {
    node: usize,
    rows: Vec<usize>,
    depth: usize,
}

fn grow_tree(
    x: ArrayView2<f64>,
    genuine: &[bool],
    params: &ForestParams,
    mtry: usize,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let n = x.nrows();
    let rows: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut nodes = vec![Node::Leaf {
        genuine_fraction: 0.0,
    }];
    let mut stack = vec![Pending {
        node: 0,
        rows,
        depth: 0,
    }];
    let mut features: Vec<usize> = (0..x.ncols()).collect();

    while let Some(Pending { node, rows, depth }) = stack.pop() {
        let pos = rows.iter().filter(|&&r| genuine[r]).count();
        let leaf = Node::Leaf {
            genuine_fraction: pos as f64 / rows.len().max(1) as f64,
        };
        let depth_capped = params.max_depth.is_some_and(|m| depth >= m);
        if pos == 0 || pos == rows.len() || depth_capped {
            nodes[node] = leaf;
            continue;
        }
        features.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        // draw features until mtry have been examined and one of them splits
        for (examined, &f) in features.iter().enumerate() {
            if examined >= mtry && best.is_some() {
                break;
            }
            if let Some((score, thr)) = best_split(x, genuine, &rows, f) {
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            nodes[node] = leaf;
            continue;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[[i, feature]] <= threshold);
        let left = nodes.len();
        let right = left + 1;
        nodes.push(Node::Leaf {
            genuine_fraction: 0.0,
        });
        nodes.push(Node::Leaf {
            genuine_fraction: 0.0,
        });
        nodes[node] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        stack.push(Pending {
            node: right,
            rows: r,
            depth: depth + 1,
        });
        stack.push(Pending {
            node: left,
            rows: l,
            depth: depth + 1,
        });
    }
    Tree { nodes }
}

/// Best threshold on one feature: minimal `n_l * gini_l + n_r * gini_r`,
/// threshold at the midpoint between adjacent distinct values.
fn best_split(x: ArrayView2<f64>, genuine: &[bool], rows: &[usize], f: usize) -> Option<(f64, f64)> {
    let mut vals: Vec<(f64, bool)> = rows.iter().map(|&r| (x[[r, f]], genuine[r])).collect();
    vals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = vals.len();
    let total_pos = vals.iter().filter(|v| v.1).count();
    let mut left_pos = 0;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..n - 1 {
        if vals[k].1 {
            left_pos += 1;
        }
        if vals[k].0 == vals[k + 1].0 {
            continue;
        }
        let nl = k + 1;
        let nr = n - nl;
        let score = nl as f64 * gini(left_pos, nl) + nr as f64 * gini(total_pos - left_pos, nr);
        if best.is_none_or(|(s, _)| score < s) {
            let mut thr = 0.5 * (vals[k].0 + vals[k + 1].0);
            if thr >= vals[k + 1].0 {
                thr = vals[k].0;
            }
            best = Some((score, thr));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn gini_values() {
        assert_eq!(gini(0, 10), 0.0);
        assert_eq!(gini(10, 10), 0.0);
        assert_eq!(gini(5, 10), 0.5);
        assert!((gini(1, 4) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn split_picks_the_clean_cut() {
        let x = array![[0.0, 5.0], [1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let g = [true, true, false, false];
        let (score, thr) = best_split(x.view(), &g, &[0, 1, 2, 3], 0).unwrap();
        assert_eq!(score, 0.0);
        assert_eq!(thr, 1.5);
        assert!(best_split(x.view(), &g, &[0, 1, 2, 3], 1).is_none());
    }

    #[test]
    fn unanimous_forest_scores_one() {
        let x = Array2::from_shape_fn((20, 2), |(i, j)| (i as f64) * if j == 0 { 1.0 } else { -1.0 });
        let g: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let params = ForestParams {
            n_trees: 15,
            bootstrap: false,
            ..Default::default()
        };
        let m = fit(x.view(), &g, &params, 1);
        assert_eq!(m.score(array![100.0, -100.0].view()), 1.0);
        assert_eq!(m.score(array![-100.0, 100.0].view()), 0.0);
    }

    #[test]
    fn same_seed_same_forest() {
        let x = Array2::from_shape_fn((50, 4), |(i, j)| ((i * 31 + j * 17) % 23) as f64);
        let g: Vec<bool> = (0..50).map(|i| (i * 7) % 5 < 2).collect();
        let a = fit(x.view(), &g, &ForestParams::default(), 99);
        let b = fit(x.view(), &g, &ForestParams::default(), 99);
        assert_eq!(a, b);
        let c = fit(x.view(), &g, &ForestParams::default(), 100);
        assert_ne!(a, c);
    }
}
