use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A perfect matching of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `mapping[row]` is the column assigned to `row`.
    pub mapping: Vec<usize>,
    /// Sum of the assigned costs, added in row order.
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix, `O(n³)` via the
/// shortest augmenting path method with row and column potentials.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::InvalidArgument(format!(
            "assignment needs a square cost matrix, got {}x{}",
            n,
            cost.cols()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::Numeric("cost matrix has non-finite entries".into()));
    }
    // 1-based internals; column 0 is a virtual start column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let slack = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; n];
    for j in 1..=n {
        mapping[row_of[j] - 1] = j - 1;
    }
    let total_cost = assignment_cost(cost, &mapping);
    Ok(Assignment { mapping, total_cost })
}

/// Sum of `cost[row][mapping[row]]` in row order.
pub fn assignment_cost(cost: &Matrix, mapping: &[usize]) -> f64 {
    mapping.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum()
}
