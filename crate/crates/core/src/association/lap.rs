//! Optimal linear assignment by shortest augmenting paths.
//!
//! Problems are square; callers pad rectangular ones with dummy rows.
//! Infeasible entries are `None` and never used. Besides the
//! optimal matching the solver returns the dual potentials, which identify
//! every optimal matching as a perfect matching over the tight edges.

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub(crate) struct SquareSolution<T> {
    /// Column of each (padded) row.
    pub row_to_col: Vec<usize>,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

/// Solves an `n x n` problem.
pub(crate) fn solve_square<T: Scalar>(
    n: usize,
    cost: &dyn Fn(usize, usize) -> Option<T>,
) -> Option<SquareSolution<T>> {
    let inf = T::infinity();
    let entry = |r: usize, c: usize| -> T { cost(r, c).unwrap_or(inf) };
    // 1-based potentials in the classic formulation; index 0 is the virtual root.
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let c = entry(i0 - 1, j - 1);
                if c.is_finite() {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return None;
            }
            for j in 0..=n {
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

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    Some(SquareSolution {
        row_to_col,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    })
}

/// Rewrites an optimal matching into the lexicographically smallest optimal
/// one (compared on the first `rows` rows in order), moving only along tight
/// edges.
pub(crate) fn lexicographic_refine<T: Scalar>(
    rows: usize,
    cost: &dyn Fn(usize, usize) -> Option<T>,
    sol: &mut SquareSolution<T>,
    tolerance: T,
) {
    let n = sol.row_to_col.len();
    let tight = |r: usize, c: usize| -> bool {
        match cost(r, c) {
            Some(e) => (e - sol.u[r] - sol.v[c]).abs() <= tolerance,
            None => false,
        }
    };
    let mut col_owner = vec![0usize; n];
    for (r, &c) in sol.row_to_col.iter().enumerate() {
        col_owner[c] = r;
    }
    let mut fixed = vec![false; n];
    let mut visited = vec![false; n];
    for r in 0..rows {
        let current = sol.row_to_col[r];
        for c in 0..current {
            if !tight(r, c) {
                continue;
            }
            let other = col_owner[c];
            if fixed[other] {
                continue;
            }
            // Try to move `other` onto `current` (freed by r) through an
            // alternating path of tight edges among unfixed rows.
            fixed[r] = true;
            visited.iter_mut().for_each(|v| *v = false);
            let ok = reroute(
                other,
                current,
                &tight,
                &fixed,
                &mut visited,
                &mut sol.row_to_col,
                &mut col_owner,
            );
            fixed[r] = false;
            if ok {
                sol.row_to_col[r] = c;
                col_owner[c] = r;
                break;
            }
        }
        fixed[r] = true;
    }
}

/// Finds an alternating path letting `row` give up its column and end on
/// `target`. On success the matching along the path is updated, except for
/// the caller's own row which is reassigned by the caller.
fn reroute(
    row: usize,
    target: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    fixed: &[bool],
    visited: &mut [bool],
    row_to_col: &mut [usize],
    col_owner: &mut [usize],
) -> bool {
    let n = row_to_col.len();
    if tight(row, target) {
        row_to_col[row] = target;
        col_owner[target] = row;
        return true;
    }
    for c in 0..n {
        if visited[c] || c == row_to_col[row] || !tight(row, c) {
            continue;
        }
        let next = col_owner[c];
        if fixed[next] {
            continue;
        }
        visited[c] = true;
        if reroute(next, target, tight, fixed, visited, row_to_col, col_owner) {
            row_to_col[row] = c;
            col_owner[c] = row;
            return true;
        }
    }
    false
}
