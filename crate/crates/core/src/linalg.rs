//! Dense LU solve with row pivoting for the small interpolation systems.

use crate::Real;

/// Relative pivot floor: a pivot below this times the largest matrix entry is singular.
pub const PIVOT_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularPivot {
    pub column: usize,
    pub pivot: f64,
}

/// Solves `matrix · x = rhs` for a row-major `n × n` matrix.
pub fn solve_dense<T: Real>(matrix: &[T], n: usize, rhs: &[T]) -> Result<Vec<T>, SingularPivot> {
    assert_eq!(matrix.len(), n * n, "matrix is not n x n");
    assert_eq!(rhs.len(), n, "rhs length differs from n");

    let mut a = matrix.to_vec();
    let mut x = rhs.to_vec();
    let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let floor = T::lit(PIVOT_FLOOR) * scale;

    for col in 0..n {
        let (piv_row, piv_abs) = (col..n).map(|r| (r, a[r * n + col].abs())).fold((col, -T::one()), |best, cand| {
            if cand.1 > best.1 {
                cand
            } else {
                best
            }
        });
        if !(piv_abs > floor) {
            return Err(SingularPivot { column: col, pivot: piv_abs.as_f64() });
        }
        if piv_row != col {
            for j in 0..n {
                a.swap(col * n + j, piv_row * n + j);
            }
            x.swap(col, piv_row);
        }
        let pivot = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / pivot;
            if factor == T::zero() {
                continue;
            }
            a[r * n + col] = T::zero();
            for j in col + 1..n {
                let upd = a[col * n + j];
                a[r * n + j] = a[r * n + j] - factor * upd;
            }
            x[r] = x[r] - factor * x[col];
        }
    }

    for row in (0..n).rev() {
        let tail = (row + 1..n).fold(T::zero(), |acc, j| acc + a[row * n + j] * x[j]);
        x[row] = (x[row] - tail) / a[row * n + row];
    }
    Ok(x)
}

/// Max-norm of `matrix · x − rhs`.
pub fn residual_max<T: Real>(matrix: &[T], n: usize, x: &[T], rhs: &[T]) -> T {
    (0..n)
        .map(|i| {
            let row = &matrix[i * n..(i + 1) * n];
            let ax = row.iter().zip(x).fold(T::zero(), |acc, (&m, &v)| acc + m * v);
            (ax - rhs[i]).abs()
        })
        .fold(T::zero(), T::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needs_pivoting() {
        // Zero leading entry forces a row swap.
        // x = (2, 1, 3) by construction.
        let m = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let b = [5.0, 3.0, 9.0];
        let x = solve_dense(&m, 3, &b).unwrap();
        assert!(residual_max(&m, 3, &x, &b) < 1e-14);
        for (got, want) in x.iter().zip([2.0f64, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-14, "{x:?}");
        }
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let m = [1.0, 2.0, 2.0, 4.0];
        let err = solve_dense(&m, 2, &[1.0, 2.0]).unwrap_err();
        assert_eq!(err.column, 1);
    }

    #[test]
    fn single_entry() {
        let x = solve_dense(&[4.0f32], 1, &[2.0]).unwrap();
        assert_eq!(x, vec![0.5]);
    }
}
