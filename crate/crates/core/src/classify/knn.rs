//! k-nearest-neighbour scoring over a stored training set.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnParams {
    pub k: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self { k: 18 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub x: Array2<f64>,
    pub genuine: Vec<bool>,
}

pub fn fit(x: Array2<f64>, genuine: Vec<bool>, params: &KnnParams) -> KnnModel {
    let k = params.k.clamp(1, x.nrows().max(1));
    KnnModel { k, x, genuine }
}

impl KnnModel {
    /// Share of genuine rows among the `k` nearest; ties in distance go to
    /// the lower training index.
    pub fn score(&self, q: ArrayView1<f64>) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .x
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let s: f64 = r.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (s, i)
            })
            .collect();
        let k = self.k.min(d.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, cmp);
        }
        let hits = d[..k].iter().filter(|(_, i)| self.genuine[*i]).count();
        hits as f64 / k as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn self_neighbour_with_k1() {
        let x = array![[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]];
        let m = fit(x.clone(), vec![true, false, true], &KnnParams { k: 1 });
        assert_eq!(m.score(x.row(0)), 1.0);
        assert_eq!(m.score(x.row(1)), 0.0);
        assert_eq!(m.score(x.row(2)), 1.0);
    }

    #[test]
    fn split_neighbourhood_is_half() {
        let x = array![[1.0], [-1.0], [10.0], [11.0]];
        let m = fit(x, vec![true, false, true, true], &KnnParams { k: 2 });
        assert_eq!(m.score(array![0.0].view()), 0.5);
    }

    #[test]
    fn k_clamps_to_training_size() {
        let x = array![[1.0], [2.0], [3.0]];
        let m = fit(x, vec![true, true, false], &KnnParams::default());
        assert_eq!(m.k, 3);
        assert!((m.score(array![0.0].view()) - 2.0 / 3.0).abs() < 1e-15);
    }
}
