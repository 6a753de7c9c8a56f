//! Exact 1-Wasserstein between two discrete measures under an arbitrary cost
//! matrix, solved with the transportation simplex (MODI potentials, Bland's
//! rule for entering and leaving cells). Intended for small instances and as
//! an independent check of the closed-form tree distance.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OtError {
    #[error("cost matrix is {rows}x{cols} but measures have {mu} and {nu} atoms")]
    DimensionMismatch { rows: usize, cols: usize, mu: usize, nu: usize },
    #[error("measures must have equal total mass ({0} vs {1})")]
    Unbalanced(f64, f64),
    #[error("negative weight or cost")]
    Negative,
    #[error("simplex did not terminate within {0} pivots")]
    NoConvergence(usize),
}

const MAX_PIVOTS: usize = 200_000;

pub fn ot_oracle(cost: &[Vec<f64>], mu: &[f64], nu: &[f64]) -> Result<f64, OtError> {
    let (m, n) = (mu.len(), nu.len());
    let cols = cost.first().map_or(0, Vec::len);
    if cost.len() != m || cost.iter().any(|r| r.len() != n) || m == 0 || n == 0 {
        return Err(OtError::DimensionMismatch { rows: cost.len(), cols, mu: m, nu: n });
    }
    if mu.iter().chain(nu).any(|&w| w < 0.0) || cost.iter().flatten().any(|&c| c < 0.0) {
        return Err(OtError::Negative);
    }
    let (sm, sn): (f64, f64) = (mu.iter().sum(), nu.iter().sum());
    if (sm - sn).abs() > 1e-9 * sm.max(sn).max(1.0) {
        return Err(OtError::Unbalanced(sm, sn));
    }

    let mut flow = vec![vec![0.0; n]; m];
    let mut basic = vec![vec![false; n]; m];
    north_west_corner(mu, nu, &mut flow, &mut basic);

    let scale = cost.iter().flatten().fold(0.0f64, |a, &c| a.max(c));
    let tol = 1e-12 * (1.0 + scale);

    for _ in 0..MAX_PIVOTS {
        let (u, v) = potentials(cost, &basic);
        let entering = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .find(|&(i, j)| !basic[i][j] && cost[i][j] - u[i] - v[j] < -tol);
        let Some((ei, ej)) = entering else {
            return Ok((0..m).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| cost[i][j] * flow[i][j]).sum());
        };

        // Cells along the basis-tree path from row `ei` to column `ej`; they
        // alternate (-, +, -, ...) around the cycle closed by the entering cell.
        let path = tree_path(&basic, ei, ej);
        let theta = path.iter().step_by(2).map(|&(i, j)| flow[i][j]).fold(f64::INFINITY, f64::min);
        let leaving = path
            .iter()
            .step_by(2)
            .copied()
            .filter(|&(i, j)| flow[i][j] == theta)
            .min()
            .expect("cycle has at least one donor cell");

        for (k, &(i, j)) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[i][j] -= theta;
            } else {
                flow[i][j] += theta;
            }
        }
        flow[ei][ej] += theta;
        basic[leaving.0][leaving.1] = false;
        flow[leaving.0][leaving.1] = 0.0;
        basic[ei][ej] = true;
    }
    Err(OtError::NoConvergence(MAX_PIVOTS))
}

/// Staircase initial basis with exactly `m + n - 1` basic cells.
fn north_west_corner(mu: &[f64], nu: &[f64], flow: &mut [Vec<f64>], basic: &mut [Vec<bool>]) {
    let (m, n) = (mu.len(), nu.len());
    let mut supply = mu.to_vec();
    let mut demand = nu.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let x = supply[i].min(demand[j]);
        flow[i][j] = x;
        basic[i][j] = true;
        supply[i] -= x;
        demand[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        let row_done = if i == m - 1 {
            false
        } else if j == n - 1 {
            true
        } else {
            supply[i] <= demand[j]
        };
        if row_done {
            supply[i] = 0.0;
            i += 1;
        } else {
            demand[j] = 0.0;
            j += 1;
        }
    }
}

/// Dual potentials with `u[0] = 0` and `u[i] + v[j] = c[i][j]` on basic cells.
fn potentials(cost: &[Vec<f64>], basic: &[Vec<bool>]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (basic.len(), basic[0].len());
    let mut u = vec![None; m];
    let mut v = vec![None; n];
    u[0] = Some(0.0);
    // nodes 0..m are rows, m..m+n are columns
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        if node < m {
            let i = node;
            let ui = u[i].unwrap();
            for j in 0..n {
                if basic[i][j] && v[j].is_none() {
                    v[j] = Some(cost[i][j] - ui);
                    queue.push_back(m + j);
                }
            }
        } else {
            let j = node - m;
            let vj = v[j].unwrap();
            for i in 0..m {
                if basic[i][j] && u[i].is_none() {
                    u[i] = Some(cost[i][j] - vj);
                    queue.push_back(i);
                }
            }
        }
    }
    (
        u.into_iter().map(|x| x.expect("basis spans all rows")).collect(),
        v.into_iter().map(|x| x.expect("basis spans all columns")).collect(),
    )
}

/// Basic cells on the unique tree path from row `from_row` to column `to_col`.
fn tree_path(basic: &[Vec<bool>], from_row: usize, to_col: usize) -> Vec<(usize, usize)> {
    let (m, n) = (basic.len(), basic[0].len());
    let start = from_row;
    let goal = m + to_col;
    let mut prev = vec![usize::MAX; m + n];
    prev[start] = start;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        let neighbours: Vec<usize> = if node < m {
            (0..n).filter(|&j| basic[node][j]).map(|j| m + j).collect()
        } else {
            (0..m).filter(|&i| basic[i][node - m]).collect()
        };
        for next in neighbours {
            if prev[next] == usize::MAX {
                prev[next] = node;
                queue.push_back(next);
            }
        }
    }
    let mut nodes = vec![goal];
    let mut cur = goal;
    while cur != start {
        cur = prev[cur];
        nodes.push(cur);
    }
    nodes.reverse();
    nodes
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            if a < m {
                (a, b - m)
            } else {
                (b, a - m)
            }
        })
        .collect()
}
