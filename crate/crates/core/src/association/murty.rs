//! Murty's k-best assignment enumeration.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::lap::{lexicographic_refine, solve_square};
use super::CostMatrix;
use crate::scalar::Scalar;

/// One complete assignment: the column chosen for each row.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub columns: Vec<usize>,
    pub cost: T,
}

/// Cheapest assignment, lexicographically smallest among equal-cost optima.
pub fn solve_assignment<T: Scalar>(m: &CostMatrix<T>) -> Option<Assignment<T>> {
    solve_constrained(m, &[], &[])
}

/// The `k` cheapest assignments in ascending cost; equal costs are ordered
/// lexicographically by column vector. Returns fewer when fewer exist and an
/// empty list when the matrix admits no assignment.
pub fn murty_kbest<T: Scalar>(m: &CostMatrix<T>, k: usize) -> Vec<Assignment<T>> {
    MurtyIter::new(m).take(k).collect()
}

/// Lazy enumeration of assignments in the order of [`murty_kbest`].
pub struct MurtyIter<'a, T> {
    matrix: &'a CostMatrix<T>,
    heap: BinaryHeap<Node<T>>,
}

impl<'a, T: Scalar> MurtyIter<'a, T> {
    pub fn new(matrix: &'a CostMatrix<T>) -> Self {
        let mut heap = BinaryHeap::new();
        if let Some(first) = solve_assignment(matrix) {
            heap.push(Node {
                solution: first,
                forced: Vec::new(),
                forbidden: Vec::new(),
            });
        }
        Self { matrix, heap }
    }
}

impl<T: Scalar> Iterator for MurtyIter<'_, T> {
    type Item = Assignment<T>;

    fn next(&mut self) -> Option<Assignment<T>> {
        let Node {
            solution,
            forced,
            forbidden,
        } = self.heap.pop()?;
        let m = self.matrix;
        // Partition the remaining space of this node around its solution.
        let mut child_forced = forced.clone();
        for r in 0..m.rows() {
            if forced.iter().any(|&(fr, _)| fr == r) {
                continue;
            }
            let mut child_forbidden = forbidden.clone();
            child_forbidden.push((r, solution.columns[r]));
            if let Some(sol) = solve_constrained(m, &child_forced, &child_forbidden) {
                self.heap.push(Node {
                    solution: sol,
                    forced: child_forced.clone(),
                    forbidden: child_forbidden,
                });
            }
            child_forced.push((r, solution.columns[r]));
        }
        Some(solution)
    }
}

fn solve_constrained<T: Scalar>(
    m: &CostMatrix<T>,
    forced: &[(usize, usize)],
    forbidden: &[(usize, usize)],
) -> Option<Assignment<T>> {
    let rows = m.rows();
    let cols = m.cols();
    if rows > cols {
        return None;
    }
    if rows == 0 {
        return Some(Assignment {
            columns: Vec::new(),
            cost: T::zero(),
        });
    }
    let mut forced_col = vec![None; rows];
    let mut col_taken = vec![false; cols];
    for &(r, c) in forced {
        forced_col[r] = Some(c);
        col_taken[c] = true;
    }
    let cost = |r: usize, c: usize| -> Option<T> {
        if r >= rows {
            // Padding rows may take any column not reserved by a forced row.
            return if col_taken[c] { None } else { Some(T::zero()) };
        }
        match forced_col[r] {
            Some(fc) if fc != c => return None,
            Some(_) => {}
            None if col_taken[c] => return None,
            None => {}
        }
        if forbidden.contains(&(r, c)) {
            return None;
        }
        m.get(r, c)
    };
    let mut sol = solve_square(cols, &cost)?;
    let scale = m.max_abs().max(T::one());
    let tolerance = T::epsilon() * T::lit(64.0 * cols as f64) * scale;
    lexicographic_refine(rows, &cost, &mut sol, tolerance);
    let columns = sol.row_to_col[..rows].to_vec();
    let total = row_order_cost(m, &columns)?;
    Some(Assignment {
        columns,
        cost: total,
    })
}

/// Sum of the chosen entries in row order; `None` if any is infeasible.
pub fn row_order_cost<T: Scalar>(m: &CostMatrix<T>, columns: &[usize]) -> Option<T> {
    let mut acc = T::zero();
    for (r, &c) in columns.iter().enumerate() {
        acc += m.get(r, c)?;
    }
    Some(acc)
}

struct Node<T> {
    solution: Assignment<T>,
    forced: Vec<(usize, usize)>,
    forbidden: Vec<(usize, usize)>,
}

impl<T: Scalar> Node<T> {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.solution
            .cost
            .partial_cmp(&other.solution.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.solution.columns.cmp(&other.solution.columns))
    }
}

impl<T: Scalar> PartialEq for Node<T> {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Node<T> {}

impl<T: Scalar> PartialOrd for Node<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Node<T> {
    // Reversed: BinaryHeap is a max-heap and we pop the cheapest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}
