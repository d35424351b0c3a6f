//! Minimal dense linear algebra on caller-owned slices.
//!
//! Every matrix in this crate is small (at most 2n x 2n with n the number of
//! configuration dimensions, so typically 2x2 to 6x6) but the factorizations
//! sit inside per-step loops that run on the order of 1e9 times in the larger
//! Monte-Carlo runs. The routines here work in place on row-major `&[f64]`
//! buffers so the hot paths never allocate.

use crate::error::{Error, Result};

/// In-place LU factorization with partial pivoting. `a` is `n x n` row-major
/// and is overwritten with the L (unit diagonal, below) and U (on and above
/// the diagonal) factors. `piv[i]` records the row swapped into position `i`.
///
/// Returns the determinant of the original matrix (0.0 when singular). A
/// singular factorization is a legitimate result here because shooting uses
/// the determinant as a monitored quantity; attempting to *solve* with one
/// fails in [`lu_solve_rows`].
pub fn lu_factor(a: &mut [f64], n: usize, piv: &mut [usize]) -> f64 {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(piv.len(), n);
    let mut det = 1.0;
    for col in 0..n {
        // 1. Pick the largest pivot in this column.
        let mut best = col;
        let mut best_abs = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > best_abs {
                best = row;
                best_abs = v;
            }
        }
        piv[col] = best;
        if best != col {
            for k in 0..n {
                a.swap(col * n + k, best * n + k);
            }
            det = -det;
        }
        let pivot = a[col * n + col];
        det *= pivot;
        if pivot == 0.0 {
            // Finish recording pivots so the buffer stays well-formed.
            for k in col + 1..n {
                piv[k] = k;
            }
            return 0.0;
        }
        // 2. Eliminate below the pivot.
        let inv = 1.0 / pivot;
        for row in col + 1..n {
            let factor = a[row * n + col] * inv;
            a[row * n + col] = factor;
            if factor != 0.0 {
                for k in col + 1..n {
                    a[row * n + k] -= factor * a[col * n + k];
                }
            }
        }
    }
    det
}

/// Solves `A X = B` given the factorization produced by [`lu_factor`].
/// `b` holds `ncols` right-hand sides as an `n x ncols` row-major block and is
/// overwritten with the solution.
pub fn lu_solve_rows(
    lu: &[f64],
    n: usize,
    piv: &[usize],
    b: &mut [f64],
    ncols: usize,
) -> Result<()> {
    debug_assert_eq!(lu.len(), n * n);
    debug_assert_eq!(b.len(), n * ncols);
    for i in 0..n {
        if lu[i * n + i] == 0.0 {
            return Err(Error::eval("singular matrix in linear solve"));
        }
    }
    // Apply recorded row swaps to the right-hand side.
    for i in 0..n {
        let p = piv[i];
        if p != i {
            for c in 0..ncols {
                b.swap(i * ncols + c, p * ncols + c);
            }
        }
    }
    // Forward substitution with unit-diagonal L.
    for i in 1..n {
        for j in 0..i {
            let l = lu[i * n + j];
            if l != 0.0 {
                for c in 0..ncols {
                    b[i * ncols + c] -= l * b[j * ncols + c];
                }
            }
        }
    }
    // Back substitution with U.
    for i in (0..n).rev() {
        for j in i + 1..n {
            let u = lu[i * n + j];
            if u != 0.0 {
                for c in 0..ncols {
                    b[i * ncols + c] -= u * b[j * ncols + c];
                }
            }
        }
        let d = 1.0 / lu[i * n + i];
        for c in 0..ncols {
            b[i * ncols + c] *= d;
        }
    }
    Ok(())
}

/// Convenience wrapper: factor a scratch copy of `a` and solve for a single
/// right-hand side in `b`. `scratch` must hold at least `n * n` elements and
/// `piv` at least `n`.
pub fn solve_in_place(
    a: &[f64],
    n: usize,
    b: &mut [f64],
    scratch: &mut [f64],
    piv: &mut [usize],
) -> Result<()> {
    scratch[..n * n].copy_from_slice(a);
    lu_factor(&mut scratch[..n * n], n, &mut piv[..n]);
    lu_solve_rows(&scratch[..n * n], n, &piv[..n], b, 1)
}

/// Determinant of a small matrix; `scratch`/`piv` as in [`solve_in_place`].
pub fn determinant(a: &[f64], n: usize, scratch: &mut [f64], piv: &mut [usize]) -> f64 {
    scratch[..n * n].copy_from_slice(a);
    lu_factor(&mut scratch[..n * n], n, &mut piv[..n])
}

/// `out = a * b` for row-major matrices: `a` is `rows x inner`, `b` is
/// `inner x cols`. `out` must not alias the inputs.
pub fn mat_mul(out: &mut [f64], a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) {
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for c in 0..cols {
            out[i * cols + c] = 0.0;
        }
        for k in 0..inner {
            let aik = a[i * inner + k];
            if aik != 0.0 {
                for c in 0..cols {
                    out[i * cols + c] += aik * b[k * cols + c];
                }
            }
        }
    }
}

/// Max-norm of a vector.
pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Max-norm of the difference of two equal-length vectors.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_lu_factor_determinant_3x3() {
        // det = 2*(5*3 - 1*2) - 1*(0*3 - 1*4) + 0 = 26 + 4 = 30
        let a = [2.0, 1.0, 0.0, 0.0, 5.0, 1.0, 4.0, 2.0, 3.0];
        let mut scratch = [0.0; 9];
        let mut piv = [0usize; 3];
        let det = determinant(&a, 3, &mut scratch, &mut piv);
        assert!((det - 30.0).abs() < 1e-12, "det = {det}");
    }

    #[test]
    fn test_solve_recovers_known_vector() {
        let a = [4.0, 1.0, 2.0, 1.0, 3.0, 0.0, 2.0, 0.0, 5.0];
        let x_true = [1.0, -2.0, 0.5];
        // b = A * x_true
        let mut b = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i] += a[i * 3 + j] * x_true[j];
            }
        }
        let mut scratch = [0.0; 9];
        let mut piv = [0usize; 3];
        solve_in_place(&a, 3, &mut b, &mut scratch, &mut piv).unwrap();
        for i in 0..3 {
            assert!(
                (b[i] - x_true[i]).abs() < 1e-12,
                "component {i}: {} vs {}",
                b[i],
                x_true[i]
            );
        }
    }

    #[test]
    fn test_multi_rhs_solve_matches_inverse() {
        let a = [1.0, 2.0, 3.0, 4.0];
        // Solve A X = I, then check A * X = I.
        let mut x = [1.0, 0.0, 0.0, 1.0];
        let mut lu = a;
        let mut piv = [0usize; 2];
        let det = lu_factor(&mut lu, 2, &mut piv);
        assert!((det - (-2.0)).abs() < 1e-14);
        lu_solve_rows(&lu, 2, &piv, &mut x, 2).unwrap();
        let mut prod = [0.0; 4];
        mat_mul(&mut prod, &a, &x, 2, 2, 2);
        let expected = [1.0, 0.0, 0.0, 1.0];
        assert!(max_abs_diff(&prod, &expected) < 1e-14);
    }

    #[test]
    fn test_singular_matrix_reports_zero_det_and_fails_solve() {
        let a = [1.0, 2.0, 2.0, 4.0];
        let mut lu = a;
        let mut piv = [0usize; 2];
        let det = lu_factor(&mut lu, 2, &mut piv);
        assert_eq!(det, 0.0);
        let mut b = [1.0, 1.0];
        assert!(lu_solve_rows(&lu, 2, &piv, &mut b, 1).is_err());
    }

    #[test]
    fn test_pivoting_handles_zero_leading_entry() {
        let a = [0.0, 1.0, 1.0, 0.0];
        let mut b = [3.0, 7.0];
        let mut scratch = [0.0; 4];
        let mut piv = [0usize; 2];
        solve_in_place(&a, 2, &mut b, &mut scratch, &mut piv).unwrap();
        // x solves [0 1; 1 0] x = (3, 7) => x = (7, 3)
        assert!((b[0] - 7.0).abs() < 1e-14);
        assert!((b[1] - 3.0).abs() < 1e-14);
    }
}
