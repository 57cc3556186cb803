//! Square linear assignment: an exact O(n³) shortest-augmenting-path solver
//! and an exhaustive oracle for small instances.

use crate::error::{Error, Result};

/// Largest size [`brute_force_lap`] accepts (9! = 362 880 permutations).
pub const BRUTE_FORCE_MAX: usize = 9;

/// Square matrix of finite costs, stored row-major in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    cost: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, cost: Vec<f64>) -> Result<Self> {
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        if cost.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "CostMatrix::new",
                left: (rows, cols),
                right: (cost.len(), 1),
            });
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("CostMatrix"));
        }
        Ok(Self { n: rows, cost })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let mut cost = Vec::with_capacity(n * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::NotSquare {
                    rows: n,
                    cols: r.len(),
                });
            }
            cost.extend_from_slice(r);
        }
        Self::new(n, n, cost)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.cost[r * self.n + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.cost[r * self.n..(r + 1) * self.n]
    }
}

/// A perfect matching: row `i` is assigned to column `perm[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_perm(c: &CostMatrix, perm: Vec<usize>) -> Self {
        let total_cost = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
        Self { perm, total_cost }
    }
}

/// Minimum-cost perfect matching via successive shortest augmenting paths
/// with row/column potentials.
pub fn solve_lap(c: &CostMatrix) -> Assignment {
    let n = c.n;
    if n == 0 {
        return Assignment {
            perm: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based internally; column 0 is the virtual source of each augmentation.
    let mut row_pot = vec![0.0f64; n + 1];
    let mut col_pot = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut prev_col = vec![0usize; n + 1];
    let mut min_slack = vec![0.0f64; n + 1];
    let mut visited = vec![false; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut cur_col = 0usize;
        min_slack.fill(f64::INFINITY);
        visited.fill(false);

        loop {
            visited[cur_col] = true;
            let i0 = col_owner[cur_col];
            let mut delta = f64::INFINITY;
            let mut next_col = 0usize;
            let costs = c.row(i0 - 1);
            for j in 1..=n {
                if visited[j] {
                    continue;
                }
                let reduced = costs[j - 1] - row_pot[i0] - col_pot[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    prev_col[j] = cur_col;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    next_col = j;
                }
            }
            for j in 0..=n {
                if visited[j] {
                    row_pot[col_owner[j]] += delta;
                    col_pot[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            cur_col = next_col;
            if col_owner[cur_col] == 0 {
                break;
            }
        }

        // Flip the alternating path back to the source.
        loop {
            let p = prev_col[cur_col];
            col_owner[cur_col] = col_owner[p];
            cur_col = p;
            if cur_col == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[col_owner[j] - 1] = j - 1;
    }
    Assignment::from_perm(c, perm)
}

/// Exhaustive minimum over all `n!` permutations. Test oracle.
pub fn brute_force_lap(c: &CostMatrix) -> Result<Assignment> {
    let n = c.n;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge {
            n,
            max: BRUTE_FORCE_MAX,
        });
    }
    let mut best_perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    search(c, 0.0, &mut perm, &mut used, &mut best, &mut best_perm);
    Ok(Assignment::from_perm(c, best_perm))
}

fn search(
    c: &CostMatrix,
    partial: f64,
    perm: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut f64,
    best_perm: &mut Vec<usize>,
) {
    let row = perm.len();
    if row == c.n {
        if partial < *best {
            *best = partial;
            best_perm.clone_from(perm);
        }
        return;
    }
    for j in 0..c.n {
        if used[j] {
            continue;
        }
        used[j] = true;
        perm.push(j);
        search(c, partial + c.get(row, j), perm, used, best, best_perm);
        perm.pop();
        used[j] = false;
    }
}
