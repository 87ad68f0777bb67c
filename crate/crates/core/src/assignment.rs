//! Rectangular linear assignment (Kuhn-Munkres with row potentials).

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("cost matrix entry ({row}, {col}) is not finite")]
pub struct NonFiniteCost {
    pub row: usize,
    pub col: usize,
}

/// Minimum-cost matching of `min(rows, cols)` pairs, sorted by row.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Result<Vec<(usize, usize)>, NonFiniteCost> {
    if let Some(i) = cost.iter().position(|v| !v.is_finite()) {
        // column-major storage
        return Err(NonFiniteCost { row: i % cost.nrows(), col: i / cost.nrows() });
    }
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let mut pairs = if n <= m {
        solve(n, m, |i, j| cost[(i, j)])
    } else {
        solve(m, n, |i, j| cost[(j, i)]).into_iter().map(|(c, r)| (r, c)).collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Maximum-score matching: the minimum-cost matching of the negated scores.
pub fn max_score_assignment(score: &DMatrix<f64>) -> Result<Vec<(usize, usize)>, NonFiniteCost> {
    min_cost_assignment(&(-score))
}

/// Shortest augmenting paths for `n <= m`; returns `(row, col)` pairs.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based internals, index 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}
