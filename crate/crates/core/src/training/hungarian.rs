//! Minimum-cost bipartite assignment between queries and ground-truth events.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{DvcError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, ground_truth)` pairs, ordered by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &Mat) -> f64 {
        let mut by_gt = self.pairs.clone();
        by_gt.sort_by_key(|&(_, g)| g);
        by_gt.iter().map(|&(q, g)| cost[[q, g]]).sum()
    }

    /// Ground-truth index assigned to each query, if any.
    pub fn target_of(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

/// Exact assignment for an `N × G` cost matrix (queries × ground truths), `G ≤ N`.
/// Every ground truth receives exactly one query.
pub fn hungarian_match(cost: &Mat) -> Result<MatchResult> {
    let (n_queries, n_gt) = cost.dim();
    if n_gt > n_queries {
        return Err(DvcError::Matching(format!("{n_gt} ground-truth events exceed {n_queries} queries")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(DvcError::Matching("cost matrix contains non-finite entries".into()));
    }
    if n_gt == 0 {
        return Ok(MatchResult { pairs: Vec::new(), unmatched_queries: (0..n_queries).collect() });
    }

    // Shortest augmenting paths with potentials. Rows are ground truths,
    // columns are queries; index 0 is a sentinel on both sides.
    let (rows, cols) = (n_gt, n_queries);
    let a = |r: usize, c: usize| cost[[c - 1, r - 1]];
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(rows);
    let mut unmatched_queries = Vec::new();
    for (q, &row) in owner.iter().enumerate().skip(1) {
        if row != 0 {
            pairs.push((q - 1, row - 1));
        } else {
            unmatched_queries.push(q - 1);
        }
    }
    Ok(MatchResult { pairs, unmatched_queries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over all injective maps ground truth → query.
    fn brute_force(cost: &Mat) -> f64 {
        fn go(cost: &Mat, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if g == cost.ncols() {
                *best = best.min(acc);
                return;
            }
            for q in 0..cost.nrows() {
                if !used[q] {
                    used[q] = true;
                    go(cost, g + 1, used, acc + cost[[q, g]], best);
                    used[q] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.nrows()], 0.0, &mut best);
        best
    }

    #[test]
    fn zero_diagonal() {
        let m = hungarian_match(&array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost(&array![[0.0, 1.0], [1.0, 0.0]]), 0.0);
    }

    #[test]
    fn anti_diagonal_is_cheaper() {
        let c = array![[4.0, 1.0], [2.0, 3.0]];
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(m.total_cost(&c), 3.0);
    }

    #[test]
    fn more_ground_truths_than_queries_fails() {
        assert!(hungarian_match(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn empty_ground_truth_leaves_everything_unmatched() {
        let m = hungarian_match(&Array2::zeros((4, 0))).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_queries, vec![0, 1, 2, 3]);
    }

    #[test]
    fn matches_brute_force_on_rectangular_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let g = rng.random_range(0..=n);
            let c = Array2::from_shape_fn((n, g), |_| rng.random_range(0.0..10.0));
            let m = hungarian_match(&c).unwrap();
            assert_eq!(m.pairs.len(), g);
            let mut seen_q = vec![false; n];
            let mut seen_g = vec![false; g];
            for &(q, j) in &m.pairs {
                assert!(!seen_q[q] && !seen_g[j]);
                seen_q[q] = true;
                seen_g[j] = true;
            }
            assert!((m.total_cost(&c) - brute_force(&c)).abs() < 1e-9);
        }
    }
}
