//! Plain (non-differentiable) factorizations and triangular solves.

use crate::error::{DkpError, Result};
use crate::linalg::Matrix;

/// Relative jitter levels tried in order, each multiplied by the mean of the diagonal.
pub const JITTER_LEVELS: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Lower Cholesky factor of a symmetric positive definite matrix, without jitter.
///
/// Only the lower triangle of `a` is read.
pub fn cholesky_strict(a: &Matrix) -> Option<Matrix> {
    if !a.is_square() {
        return None;
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        {
            let lj = l.row(j);
            for k in 0..j {
                d -= lj[k] * lj[k];
            }
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            let (li, lj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= li[k] * lj[k];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Cholesky factor under the jitter policy; returns the factor and the absolute jitter added.
pub fn cholesky_jittered(a: &Matrix) -> Result<(Matrix, f64)> {
    if !a.is_square() {
        return Err(DkpError::shape(
            "cholesky",
            format!("{}x{} is not square", a.rows(), a.cols()),
        ));
    }
    if !a.is_finite() {
        return Err(DkpError::Decomposition { attempted: vec![] });
    }
    let n = a.rows();
    if n == 0 {
        return Ok((Matrix::zeros(0, 0), 0.0));
    }
    let mean_diag = a.trace() / n as f64;
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut attempted = Vec::with_capacity(JITTER_LEVELS.len());
    for level in JITTER_LEVELS {
        let jitter = level * base;
        attempted.push(jitter);
        let l = if jitter == 0.0 {
            cholesky_strict(a)
        } else {
            let mut aj = a.clone();
            aj.add_diag(jitter);
            cholesky_strict(&aj)
        };
        if let Some(l) = l {
            return Ok((l, jitter));
        }
    }
    Err(DkpError::Decomposition { attempted })
}

/// Solves `L X = B` (or `L^T X = B` when `transpose`) for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix, transpose: bool) -> Result<Matrix> {
    let n = l.rows();
    if !l.is_square() || b.rows() != n {
        return Err(DkpError::shape(
            "triangular_solve",
            format!(
                "factor {}x{} against rhs {}x{}",
                l.rows(),
                l.cols(),
                b.rows(),
                b.cols()
            ),
        ));
    }
    for i in 0..n {
        if l[(i, i)] == 0.0 {
            return Err(DkpError::SingularTriangle { index: i });
        }
    }
    let m = b.cols();
    let mut x = b.clone();
    if !transpose {
        for i in 0..n {
            for k in 0..i {
                let c = l[(i, k)];
                if c != 0.0 {
                    let (head, tail) = x.as_mut_slice().split_at_mut(i * m);
                    let xk = &head[k * m..(k + 1) * m];
                    for (xi, xkv) in tail[..m].iter_mut().zip(xk) {
                        *xi -= c * xkv;
                    }
                }
            }
            let inv = 1.0 / l[(i, i)];
            for v in x.row_mut(i) {
                *v *= inv;
            }
        }
    } else {
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let c = l[(k, i)];
                if c != 0.0 {
                    let (head, tail) = x.as_mut_slice().split_at_mut(k * m);
                    let xk = &tail[..m];
                    for (xi, xkv) in head[i * m..(i + 1) * m].iter_mut().zip(xk) {
                        *xi -= c * xkv;
                    }
                }
            }
            let inv = 1.0 / l[(i, i)];
            for v in x.row_mut(i) {
                *v *= inv;
            }
        }
    }
    Ok(x)
}

/// `A^{-1} B` for SPD `A` through its (jittered) Cholesky factor.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (l, _) = cholesky_jittered(a)?;
    let y = solve_lower(&l, b, false)?;
    solve_lower(&l, &y, true)
}

/// `log |A|` of an SPD matrix.
pub fn logdet_spd(a: &Matrix) -> Result<f64> {
    let (l, _) = cholesky_jittered(a)?;
    Ok(2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.as_slice());
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_cholesky() {
        let l = cholesky_strict(&Matrix::scalar(4.0)).unwrap();
        assert_eq!(l.item(), 2.0);
    }

    #[test]
    fn two_by_two_reconstructs() {
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let (l, jitter) = cholesky_jittered(&a).unwrap();
        assert_eq!(jitter, 0.0);
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let (l, jitter) = cholesky_jittered(&a).unwrap();
        assert!(jitter > 0.0);
        let mut aj = a.clone();
        aj.add_diag(jitter);
        assert!(l.matmul(&l.transpose()).unwrap().max_abs_diff(&aj) < 1e-10);
    }

    #[test]
    fn indefinite_matrix_fails_with_levels() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap();
        match cholesky_jittered(&a) {
            Err(DkpError::Decomposition { attempted }) => assert_eq!(attempted.len(), JITTER_LEVELS.len()),
            other => panic!("expected decomposition error, got {other:?}"),
        }
    }

    #[test]
    fn forward_substitution_by_hand() {
        let l = Matrix::from_rows(&[[2.0, 0.0], [1.0, 1.0]]).unwrap();
        let b = Matrix::column(&[2.0, 3.0]);
        let x = solve_lower(&l, &b, false).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn transposed_solve_reconstructs() {
        let l = Matrix::from_rows(&[[2.0, 0.0, 0.0], [1.0, 1.5, 0.0], [-0.5, 0.25, 3.0]]).unwrap();
        let b = Matrix::from_fn(3, 4, |i, j| (i as f64) - 0.5 * j as f64);
        let x = solve_lower(&l, &b, true).unwrap();
        let back = l.transpose().matmul(&x).unwrap();
        assert!(back.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_diagonal_is_singular() {
        let l = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(
            solve_lower(&l, &Matrix::column(&[1.0, 1.0]), false),
            Err(DkpError::SingularTriangle { index: 1 })
        ));
    }
}
