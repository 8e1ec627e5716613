//! Minimum-cost assignment (Kuhn-Munkres with potentials, O(n²m)).

use nalgebra::DMatrix;

/// Optimal assignment for a rectangular cost matrix: entry `i` is the column
/// given to row `i`, or None when there are more rows than columns and the
/// row is left out. Every row is matched when `rows ≤ cols` and vice versa.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let cols = hungarian(&cost.transpose());
        let mut rows = vec![None; n];
        for (j, r) in cols.into_iter().enumerate() {
            if let Some(i) = r {
                rows[i] = Some(j);
            }
        }
        return rows;
    }
    // 1-based arrays with a virtual column 0, following the classic scheme
    let inf = f64::INFINITY;
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
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
    let mut rows = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = Some(j - 1);
        }
    }
    rows
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &DMatrix<f64>, assign: &[Option<usize>]) -> f64 {
    assign.iter().enumerate().filter_map(|(i, j)| j.map(|j| cost[(i, j)])).sum()
}
