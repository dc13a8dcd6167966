//! Min-cost bipartite assignment via shortest augmenting paths with
//! potentials, O(n^2 m). Rectangular inputs are handled by solving the
//! transposed problem when rows outnumber columns.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum HungarianError {
    /// Cost entries must be finite for the potentials to be well-defined.
    NonFiniteCost { row: usize, col: usize, value: f64 },
    NotMatrix { shape: Vec<usize> },
}

impl core::fmt::Display for HungarianError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HungarianError::NonFiniteCost { row, col, value } => {
                write!(f, "non-finite cost {value} at ({row}, {col})")
            }
            HungarianError::NotMatrix { shape } => {
                write!(f, "cost must be a rank-2 tensor, got shape {shape:?}")
            }
        }
    }
}

impl core::error::Error for HungarianError {}

/// `pairs` holds `min(n, m)` (row, col) entries sorted by row index;
/// `total_cost` is their cost sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

pub fn hungarian_match(cost: &Tensor) -> Result<Assignment, HungarianError> {
    if cost.shape().len() != 2 {
        return Err(HungarianError::NotMatrix {
            shape: cost.shape().to_vec(),
        });
    }
    let (n, m) = (cost.rows(), cost.cols());
    for (i, &v) in cost.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(HungarianError::NonFiniteCost {
                row: i / m.max(1),
                col: i % m.max(1),
                value: v,
            });
        }
    }
    if n == 0 || m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let transposed = n > m;
    let at = |i: usize, j: usize| {
        if transposed {
            cost.data()[j * m + i]
        } else {
            cost.data()[i * m + j]
        }
    };
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };

    // 1-based arrays; column 0 is the virtual unmatched slot.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut matched_row = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let slack = at(i0 - 1, j - 1) - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut pairs = Vec::with_capacity(rows);
    for (j, &row) in matched_row.iter().enumerate().skip(1) {
        if row != 0 {
            let (r, c) = (row - 1, j - 1);
            if transposed {
                pairs.push((c, r));
            } else {
                pairs.push((r, c));
            }
        }
    }
    pairs.sort_unstable();
    let total_cost = pairs
        .iter()
        .map(|&(r, c)| cost.data()[r * m + c])
        .sum();
    Ok(Assignment { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn brute_force_min(cost: &Tensor) -> f64 {
        let (n, m) = (cost.rows(), cost.cols());
        let (small, large, row_major) = if n <= m { (n, m, true) } else { (m, n, false) };
        let at = |i: usize, j: usize| {
            if row_major {
                cost.data()[i * m + j]
            } else {
                cost.data()[j * m + i]
            }
        };
        let mut best = f64::INFINITY;
        let mut picked = vec![false; large];
        fn rec(
            i: usize,
            small: usize,
            large: usize,
            acc: f64,
            picked: &mut [bool],
            best: &mut f64,
            at: &dyn Fn(usize, usize) -> f64,
        ) {
            if i == small {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for j in 0..large {
                if !picked[j] {
                    picked[j] = true;
                    rec(i + 1, small, large, acc + at(i, j), picked, best, at);
                    picked[j] = false;
                }
            }
        }
        rec(0, small, large, 0.0, &mut picked, &mut best, &at);
        best
    }

    #[test]
    fn one_by_one() {
        let c = Tensor::new(vec![1, 1], vec![3.5]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, [(0, 0)]);
        assert_eq!(a.total_cost, 3.5);
    }

    #[test]
    fn identity_favoring_cost_takes_diagonal() {
        let c = Tensor::new(
            vec![3, 3],
            vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, [(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn forced_off_diagonal() {
        // Row 0 prefers col 0, but giving it away lowers the total.
        let c = Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 10.0]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, [(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn rectangular_wide_matches_all_rows() {
        let c = Tensor::new(vec![2, 4], vec![5.0, 1.0, 9.0, 9.0, 9.0, 9.0, 2.0, 7.0]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, [(0, 1), (1, 2)]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn rectangular_tall_matches_all_cols() {
        let c = Tensor::new(vec![4, 2], vec![5.0, 9.0, 1.0, 9.0, 9.0, 2.0, 9.0, 7.0]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, [(1, 0), (2, 1)]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn empty_dimensions_give_empty_assignment() {
        let c = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert_eq!(hungarian_match(&c).unwrap().pairs, []);
    }

    #[test]
    fn nan_cost_is_rejected() {
        let c = Tensor::new(vec![2, 2], vec![0.0, 1.0, f64::NAN, 0.0]).unwrap();
        match hungarian_match(&c).unwrap_err() {
            HungarianError::NonFiniteCost { row, col, value } => {
                assert_eq!((row, col), (1, 0));
                assert!(value.is_nan());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = stream(21, "test.hungarian");
        for trial in 0..300 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = Tensor::new(vec![n, m], data).unwrap();
            let a = hungarian_match(&c).unwrap();
            let want = brute_force_min(&c);
            assert!(
                (a.total_cost - want).abs() < 1e-9,
                "trial {trial}: got {} want {want}",
                a.total_cost
            );
            assert_eq!(a.pairs.len(), n.min(m));
            let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), a.pairs.len());
            assert_eq!(cols.len(), a.pairs.len());
        }
    }

    #[test]
    fn never_beaten_by_sampled_permutations() {
        let mut rng = stream(22, "test.hungarian.sampled");
        for _ in 0..100 {
            let n = rng.gen_range(1..=8);
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c = Tensor::new(vec![n, n], data.clone()).unwrap();
            let a = hungarian_match(&c).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            for _ in 0..50 {
                for i in (1..n).rev() {
                    let j = rng.gen_range(0..=i);
                    perm.swap(i, j);
                }
                let cost: f64 = perm.iter().enumerate().map(|(i, &j)| data[i * n + j]).sum();
                assert!(a.total_cost <= cost + 1e-12);
            }
        }
    }
}
