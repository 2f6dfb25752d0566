//! Dense linear algebra on small row-major matrices: Gaussian elimination
//! with partial pivoting, Gauss-Jordan inversion, and a cyclic Jacobi
//! eigendecomposition for symmetric matrices.
//!
//! The systems in this crate are tiny (thin-plate-spline control grids and
//! feature covariances up to a few hundred rows), so O(n^3) direct methods
//! are the right tool.

use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is singular or nearly singular (pivot {pivot:.3e} at column {col})")]
    Singular { col: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("eigendecomposition did not converge after {0} sweeps")]
    NoConvergence(usize),
}

/// `c = a * b` for row-major `a` (n x k) and `b` (k x m).
pub fn mat_mul<R: Real>(a: &[R], b: &[R], n: usize, k: usize, m: usize) -> Vec<R> {
    assert_eq!(a.len(), n * k, "lhs size");
    assert_eq!(b.len(), k * m, "rhs size");
    let mut c = vec![R::zero(); n * m];
    for i in 0..n {
        for l in 0..k {
            let alk = a[i * k + l];
            if alk == R::zero() {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            let crow = &mut c[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += alk * brow[j];
            }
        }
    }
    c
}

/// Transpose of a row-major n x m matrix.
pub fn transpose<R: Real>(a: &[R], n: usize, m: usize) -> Vec<R> {
    assert_eq!(a.len(), n * m);
    let mut t = vec![R::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = a[i * m + j];
        }
    }
    t
}

/// Solves `a * x = b` for multiple right-hand sides.
///
/// `a` is n x n row-major and is consumed as the working copy; `b` is n x m
/// (each column one system). Partial pivoting; fails if the best available
/// pivot is negligible relative to the matrix scale.
pub fn solve<R: Real>(mut a: Vec<R>, mut b: Vec<R>, n: usize, m: usize) -> Result<Vec<R>, LinalgError> {
    if a.len() != n * n {
        return Err(LinalgError::Dimension(format!(
            "coefficient matrix has {} entries, expected {n}x{n}",
            a.len()
        )));
    }
    if b.len() != n * m {
        return Err(LinalgError::Dimension(format!(
            "right-hand side has {} entries, expected {n}x{m}",
            b.len()
        )));
    }
    let scale = a
        .iter()
        .fold(R::zero(), |acc, &v| acc.max(v.abs()))
        .max(R::min_positive_value());
    let tol = scale * R::epsilon() * R::from_usize(n.max(4)).unwrap();

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_abs = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > pivot_abs {
                pivot_abs = v;
                pivot_row = row;
            }
        }
        if pivot_abs <= tol {
            return Err(LinalgError::Singular {
                col,
                pivot: pivot_abs.to_f64_lossless(),
            });
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..m {
                b.swap(col * m + j, pivot_row * m + j);
            }
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == R::zero() {
                continue;
            }
            a[row * n + col] = R::zero();
            for j in col + 1..n {
                let v = a[col * n + j];
                a[row * n + j] -= factor * v;
            }
            for j in 0..m {
                let v = b[col * m + j];
                b[row * m + j] -= factor * v;
            }
        }
    }

    for col in (0..n).rev() {
        let pivot = a[col * n + col];
        for j in 0..m {
            let mut acc = b[col * m + j];
            for l in col + 1..n {
                acc -= a[col * n + l] * b[l * m + j];
            }
            b[col * m + j] = acc / pivot;
        }
    }
    Ok(b)
}

/// Inverse of an n x n matrix via [`solve`] against the identity.
pub fn invert<R: Real>(a: &[R], n: usize) -> Result<Vec<R>, LinalgError> {
    let mut eye = vec![R::zero(); n * n];
    for i in 0..n {
        eye[i * n + i] = R::one();
    }
    solve(a.to_vec(), eye, n, n)
}

/// Eigendecomposition of a symmetric n x n matrix by the cyclic Jacobi
/// method. Returns `(eigenvalues, eigenvectors)` where eigenvectors are
/// row-major with eigenvector `k` in column `k`, so `a = v * diag(w) * v^T`.
/// Eigenvalues are sorted ascending.
pub fn jacobi_eigen<R: Real>(a: &[R], n: usize) -> Result<(Vec<R>, Vec<R>), LinalgError> {
    assert_eq!(a.len(), n * n, "matrix size");
    let mut m = a.to_vec();
    // Symmetrize defensively; callers pass nearly symmetric accumulations.
    for i in 0..n {
        for j in i + 1..n {
            let avg = (m[i * n + j] + m[j * n + i]) / R::from_f64_approx(2.0);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = vec![R::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = R::one();
    }
    let max_sweeps = 60;
    let two = R::from_f64_approx(2.0);
    for sweep in 0..max_sweeps {
        let mut off = R::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        let diag_scale = (0..n).map(|i| m[i * n + i].abs()).fold(R::one(), R::max);
        if off.sqrt() <= diag_scale * R::epsilon() * R::from_usize(n * n).unwrap() {
            let mut pairs: Vec<(R, usize)> = (0..n).map(|i| (m[i * n + i], i)).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let evals: Vec<R> = pairs.iter().map(|p| p.0).collect();
            let mut evecs = vec![R::zero(); n * n];
            for (dst, &(_, src)) in pairs.iter().enumerate() {
                for row in 0..n {
                    evecs[row * n + dst] = v[row * n + src];
                }
            }
            return Ok((evals, evecs));
        }
        let _ = sweep;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == R::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (two * apq);
                // Stable rotation: t = sign(theta) / (|theta| + sqrt(theta^2 + 1)).
                let t = if theta >= R::zero() {
                    R::one() / (theta + (theta * theta + R::one()).sqrt())
                } else {
                    -R::one() / (-theta + (theta * theta + R::one()).sqrt())
                };
                let c = R::one() / (t * t + R::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(LinalgError::NoConvergence(max_sweeps))
}
