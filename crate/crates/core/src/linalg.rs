//! Dense helpers shared by the estimators: symmetric pseudo-inverses, small
//! Woodbury cores and norms.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues below `PINV_REL_TOL * lambda_max` are treated as zero.
pub const PINV_REL_TOL: f64 = 1e-10;

/// Largest 1-norm condition number accepted for a 2x2/3x3 Woodbury core.
pub const MAX_CORE_CONDITION: f64 = 1e12;

/// Generalized inverse of a symmetric positive semidefinite matrix by
/// eigendecomposition. Returns the inverse and the numerical rank.
pub fn sym_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if lambda_max == 0.0 || !lambda_max.is_finite() {
        return (DMatrix::zeros(n, n), 0);
    }
    let tau = PINV_REL_TOL * lambda_max;
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > tau {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            out.ger(1.0 / lam, &v, &v, 1.0);
        }
    }
    symmetrize(&mut out);
    (out, rank)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    extreme_eigenvalues(a).0
}

/// `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn extreme_eigenvalues(a: &DMatrix<f64>) -> (f64, f64) {
    let mut s = a.clone();
    symmetrize(&mut s);
    let ev = s.symmetric_eigen().eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().iter().copied().fold(0.0, f64::max)
}

/// `a <- (a + a') / 2`
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive definite matrix, `None` when the
/// Cholesky factorization fails.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let inv = s.cholesky()?.inverse();
    Some(inv)
}

/// Relative operator-norm distance `|a - b| / |b|`.
pub fn rel_op_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = spectral_norm(b);
    let num = spectral_norm(&(a - b));
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}

/// Symmetric core of at most three rows used by the Woodbury updates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SmallCore<const R: usize> {
    pub a: [[f64; R]; R],
}

impl<const R: usize> SmallCore<R> {
    /// Gauss-Jordan inverse with partial pivoting; `None` if singular or if
    /// the 1-norm condition number exceeds [`MAX_CORE_CONDITION`].
    pub fn inverse(&self) -> Option<[[f64; R]; R]> {
        let mut m = self.a;
        let mut inv = [[0.0; R]; R];
        for (i, row) in inv.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for col in 0..R {
            let mut piv = col;
            for r in (col + 1)..R {
                if m[r][col].abs() > m[piv][col].abs() {
                    piv = r;
                }
            }
            if m[piv][col] == 0.0 || !m[piv][col].is_finite() {
                return None;
            }
            m.swap(col, piv);
            inv.swap(col, piv);
            let p = m[col][col];
            for k in 0..R {
                m[col][k] /= p;
                inv[col][k] /= p;
            }
            for r in 0..R {
                if r != col {
                    let f = m[r][col];
                    if f != 0.0 {
                        for k in 0..R {
                            m[r][k] -= f * m[col][k];
                            inv[r][k] -= f * inv[col][k];
                        }
                    }
                }
            }
        }
        let cond = one_norm(&self.a) * one_norm(&inv);
        if !cond.is_finite() || cond >= MAX_CORE_CONDITION {
            return None;
        }
        Some(inv)
    }
}

fn one_norm<const R: usize>(a: &[[f64; R]; R]) -> f64 {
    (0..R)
        .map(|j| (0..R).map(|i| a[i][j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Applies `h <- factor * (h - HU C^{-1} (HU)')` for a symmetric `h`, where
/// the columns of `hu` hold `H u_j` and `core_inv = C^{-1}`. The result is
/// written symmetrically.
pub(crate) fn woodbury_apply<const R: usize>(
    h: &mut DMatrix<f64>,
    hu: &[DVector<f64>],
    core_inv: &[[f64; R]; R],
    factor: f64,
) {
    let n = h.nrows();
    for j in 0..n {
        for i in 0..=j {
            let mut corr = 0.0;
            for a in 0..R {
                let ha = hu[a][i];
                for b in 0..R {
                    corr += ha * core_inv[a][b] * hu[b][j];
                }
            }
            let v = factor * (0.5 * (h[(i, j)] + h[(j, i)]) - corr);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
}
