//! Small dense symmetric-matrix routines: cyclic Jacobi eigendecomposition
//! and Cholesky factorization with triangular solves. Matrices are row-major
//! `Vec<S>` of length n*n; everything here targets the small systems this
//! pipeline produces (3x3 covariances, 4x4 PCA, M_ind x M_ind Gram matrices).

use crate::num::Real;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvector j stored as column j
/// of the returned row-major matrix. Unsorted.
pub fn sym_eigen<S: Real>(n: usize, a: &[S]) -> (Vec<S>, Vec<S>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![S::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = S::one();
    }
    let tol = S::c(1e-14);
    for _sweep in 0..100 {
        let mut off = S::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off + m[p * n + q] * m[p * n + q];
            }
        }
        let scale: S = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum();
        if off <= tol * tol * (scale + S::one()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (S::c(2.0) * apq);
                let t = if theta >= S::zero() {
                    S::one() / (theta + (S::one() + theta * theta).sqrt())
                } else {
                    -S::one() / (-theta + (S::one() + theta * theta).sqrt())
                };
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[p * n + j];
                    let mqj = m[q * n + j];
                    m[p * n + j] = c * mpj - s * mqj;
                    m[q * n + j] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| m[i * n + i]).collect();
    (vals, v)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// On failure reports the pivot index whose value went non-positive.
pub fn cholesky<S: Real>(n: usize, a: &[S]) -> Result<Vec<S>, usize> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum = sum - l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= S::zero() {
                    return Err(i);
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve L y = b for lower-triangular L.
pub fn solve_lower<S: Real>(n: usize, l: &[S], b: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); n];
    solve_lower_into(n, l, b, &mut y);
    y
}

/// Solve L y = b into a caller-provided buffer, avoiding allocation.
pub fn solve_lower_into<S: Real>(n: usize, l: &[S], b: &[S], y: &mut [S]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let mut acc = b[i];
        for (lk, yk) in row.iter().zip(y.iter()) {
            acc = acc - *lk * *yk;
        }
        y[i] = acc / l[i * n + i];
    }
}

/// Solve L^T x = y for lower-triangular L.
pub fn solve_lower_transpose<S: Real>(n: usize, l: &[S], y: &[S]) -> Vec<S> {
    let mut x = y.to_vec();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[k * n + i] * x[k];
            x[i] = x[i] - t;
        }
        x[i] = x[i] / l[i * n + i];
    }
    x
}

/// Solve (L L^T) x = b.
pub fn solve_cholesky<S: Real>(n: usize, l: &[S], b: &[S]) -> Vec<S> {
    solve_lower_transpose(n, l, &solve_lower(n, l, b))
}
