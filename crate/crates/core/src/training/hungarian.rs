//! Minimum-cost rectangular assignment.
//!
//! The core solver is the O(n²m) shortest-augmenting-path method with row and
//! column potentials. Ties between optimal assignments are then resolved
//! toward the lexicographically smallest sorted pair list by fixing pairs one
//! row at a time and re-solving the remainder.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchAssignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl MatchAssignment {
    pub fn total(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
    }

    fn from_pairs(mut pairs: Vec<(usize, usize)>, n: usize, m: usize) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; n];
        let mut col_used = vec![false; m];
        for &(i, j) in &pairs {
            row_used[i] = true;
            col_used[j] = true;
        }
        MatchAssignment {
            pairs,
            unmatched_rows: (0..n).filter(|&i| !row_used[i]).collect(),
            unmatched_cols: (0..m).filter(|&j| !col_used[j]).collect(),
        }
    }
}

/// Potentials method for `n <= m`; returns the column of each row.
fn solve_wide(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Optimal pairs over a row/column subset, covering `min(|rows|, |cols|)`.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<(usize, usize)> {
    if rows.is_empty() || cols.is_empty() {
        return Vec::new();
    }
    if rows.len() <= cols.len() {
        let a = solve_wide(cost, rows, cols);
        rows.iter().zip(a).map(|(&i, j)| (i, cols[j])).collect()
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len()).map(|j| cost.iter().map(|r| r[j]).collect()).collect();
        let a = solve_wide(&t, cols, rows);
        cols.iter().zip(a).map(|(&j, i)| (rows[i], j)).collect()
    }
}

fn value(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

/// Minimum-total-cost one-to-one assignment of `min(n, m)` pairs.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("hungarian", "ragged cost matrix"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Runtime("hungarian: cost matrix contains a non-finite entry".into()));
    }
    if n == 0 || m == 0 {
        return Ok(MatchAssignment::from_pairs(Vec::new(), n, m));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = value(cost, &solve(cost, &all_rows, &all_cols));
    let scale: f64 = cost.iter().flatten().map(|c| c.abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale * (n.min(m) as f64);
    let target = n.min(m);

    // Fix pairs row by row, always taking the smallest column (or leaving the
    // row unmatched) that still admits an optimal completion.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(target);
    let mut fixed_cost = 0.0;
    let mut free_cols = all_cols;
    for i in 0..n {
        if fixed.len() == target {
            break;
        }
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (pos, &j) in free_cols.iter().enumerate() {
            let mut cols = free_cols.clone();
            cols.remove(pos);
            let rest = solve(cost, &rest_rows, &cols);
            if fixed.len() + 1 + rest.len() == target && fixed_cost + cost[i][j] + value(cost, &rest) <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let j = free_cols.remove(pos);
                fixed.push((i, j));
                fixed_cost += cost[i][j];
            }
            // Row i is left unmatched in every optimal completion considered.
            None => {}
        }
    }
    Ok(MatchAssignment::from_pairs(fixed, n, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let a = hungarian(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total(&[vec![1.0, 2.0], vec![3.0, 0.0]]), 1.0);
    }

    #[test]
    fn diagonal_preference() {
        let c: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        assert_eq!(hungarian(&c).unwrap().pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn rectangular_both_ways() {
        let tall = vec![vec![5.0, 1.0], vec![1.0, 5.0], vec![0.0, 0.5]];
        let a = hungarian(&tall).unwrap();
        assert_eq!(a.pairs.len(), 2);
        assert_eq!(a.total(&tall), 1.0);
        assert_eq!(a.unmatched_rows, vec![1]);
        let wide: Vec<Vec<f64>> = (0..2).map(|j| tall.iter().map(|r| r[j]).collect()).collect();
        let b = hungarian(&wide).unwrap();
        assert_eq!(b.total(&wide), 1.0);
        assert_eq!(b.unmatched_cols, vec![1]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let flat = vec![vec![1.0; 3]; 3];
        assert_eq!(hungarian(&flat).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let tall = vec![vec![2.0], vec![2.0], vec![2.0]];
        assert_eq!(hungarian(&tall).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn nan_is_rejected() {
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn empty_sides() {
        let a = hungarian(&[vec![], vec![]]).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_rows, vec![0, 1]);
    }
}
