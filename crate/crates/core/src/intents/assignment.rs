//! Maximum-weight perfect matching on a dense square matrix (Hungarian algorithm).

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Permutation `perm` maximizing `Σ_i s[i][perm[i]]`.
///
/// Shortest augmenting path formulation with row/column potentials, O(n³).
pub fn solve_assignment(s: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let (rows, cols) = s.dim();
    if rows != cols {
        return Err(Error::Shape(format!(
            "similarity matrix must be square, got {rows}x{cols}"
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("in similarity matrix".into()));
    }
    let n = rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    // minimize cost = -similarity; index 0 is a sentinel in the 1-based arrays below
    let cost = |i: usize, j: usize| -s[[i - 1, j - 1]];

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0, j) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[row_of_col[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// `Σ_i s[i][perm[i]]`, summed in row order.
pub fn assignment_total(s: ArrayView2<'_, f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| s[[i, j]]).sum()
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::*;

    #[test]
    fn diagonal_dominant() {
        let s = array![[0.9, 0.1], [0.2, 0.8]];
        let perm = solve_assignment(s.view()).unwrap();
        assert_eq!(perm, vec![0, 1]);
        assert!((assignment_total(s.view(), &perm) - 1.7).abs() < 1e-15);
    }

    #[test]
    fn recovers_a_permutation_matrix() {
        let target = [3, 0, 4, 1, 2];
        let mut s = Array2::zeros((5, 5));
        for (i, &j) in target.iter().enumerate() {
            s[[i, j]] = 1.0;
        }
        assert_eq!(solve_assignment(s.view()).unwrap(), target);
    }

    #[test]
    fn non_square_is_rejected() {
        let s = Array2::<f64>::zeros((2, 3));
        assert!(matches!(solve_assignment(s.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn negative_entries() {
        let s = array![[-5.0, -1.0, -3.0], [-2.0, -8.0, -1.0], [-1.0, -2.0, -9.0]];
        let perm = solve_assignment(s.view()).unwrap();
        assert_eq!(assignment_total(s.view(), &perm), -3.0);
    }
}
