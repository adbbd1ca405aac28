//! Small dense linear algebra: Cholesky factorization and SPD solves.
//!
//! Everything downstream scores tokens with quadratic forms x' Sigma^-1 x, so
//! the only factorization we carry is Cholesky. Matrices here are plain
//! row-major `Vec<f64>` with an explicit dimension, not `Tensor`, because the
//! covariance path never mixes ranks.

use crate::error::{BeraError, Result};

/// Lower-triangular Cholesky factor L of an SPD matrix A = L L'.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    dim: usize,
    /// Row-major lower triangle, including diagonal; upper entries are zero.
    lower: Vec<f64>,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Rebuild a factor from a stored lower triangle (e.g. a reference file).
    pub fn from_lower(dim: usize, lower: Vec<f64>) -> Result<Self> {
        if lower.len() != dim * dim {
            return Err(BeraError::DimensionMismatch {
                expected: dim * dim,
                got: lower.len(),
            });
        }
        for i in 0..dim {
            if lower[i * dim + i] <= 0.0 || !lower[i * dim + i].is_finite() {
                return Err(BeraError::NotPositiveDefinite {
                    row: i,
                    pivot: lower[i * dim + i],
                });
            }
            for j in i + 1..dim {
                if lower[i * dim + j] != 0.0 {
                    return Err(BeraError::CorruptFile(format!(
                        "stored cholesky factor has nonzero above diagonal at ({}, {})",
                        i, j
                    )));
                }
            }
        }
        Ok(SpdFactor { dim, lower })
    }

    /// log det A = 2 sum log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].ln())
            .sum::<f64>()
            * 2.0
    }

    /// Solve A x = b in place via forward then back substitution.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(BeraError::DimensionMismatch {
                expected: self.dim,
                got: b.len(),
            });
        }
        let n = self.dim;
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= l[i * n + j] * y[j];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= l[j * n + i] * y[j];
            }
            y[i] = s / l[i * n + i];
        }
        Ok(y)
    }

    /// Quadratic form x' A^-1 x = ||L^-1 x||^2, via one forward substitution.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(BeraError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let n = self.dim;
        let l = &self.lower;
        let mut y = x.to_vec();
        let mut acc = 0.0;
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= l[i * n + j] * y[j];
            }
            let v = s / l[i * n + i];
            y[i] = v;
            acc += v * v;
        }
        Ok(acc)
    }
}

/// Cholesky-factor a symmetric positive definite matrix (row-major, n x n).
/// Symmetry is enforced up to a relative tolerance of 1e-10; a non-positive
/// pivot reports the failing row so callers can suggest a larger ridge.
pub fn cholesky_spd(a: &[f64], n: usize) -> Result<SpdFactor> {
    if a.len() != n * n {
        return Err(BeraError::DimensionMismatch {
            expected: n * n,
            got: a.len(),
        });
    }
    if n == 0 {
        return Err(BeraError::EmptyInput("cholesky of 0 x 0 matrix"));
    }
    let scale = a
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-10 * scale {
                return Err(BeraError::ShapeMismatch(format!(
                    "matrix not symmetric at ({}, {}): {} vs {}",
                    i,
                    j,
                    a[i * n + j],
                    a[j * n + i]
                )));
            }
        }
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(BeraError::NotPositiveDefinite { row: i, pivot: s });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(SpdFactor { dim: n, lower: l })
}

/// Mean of rows of an (n x d) row-major matrix.
pub fn row_mean(rows: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(BeraError::EmptyInput("row_mean of no rows"));
    }
    if rows.len() != n * d {
        return Err(BeraError::DimensionMismatch {
            expected: n * d,
            got: rows.len(),
        });
    }
    let mut mu = vec![0.0; d];
    for r in rows.chunks(d) {
        for (m, v) in mu.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    Ok(mu)
}

/// Sample covariance (divisor n - 1) of rows of an (n x d) matrix about `mu`.
pub fn sample_covariance(rows: &[f64], n: usize, d: usize, mu: &[f64]) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(BeraError::TooFewSamples { need: 2, got: n });
    }
    if rows.len() != n * d || mu.len() != d {
        return Err(BeraError::DimensionMismatch {
            expected: n * d,
            got: rows.len(),
        });
    }
    let mut cov = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for r in rows.chunks(d) {
        for (dst, (v, m)) in diff.iter_mut().zip(r.iter().zip(mu.iter())) {
            *dst = v - m;
        }
        for i in 0..d {
            let di = diff[i];
            if di == 0.0 {
                continue;
            }
            let row = &mut cov[i * d..(i + 1) * d];
            for (c, &dj) in row.iter_mut().zip(diff.iter()) {
                *c += di * dj;
            }
        }
    }
    let inv = 1.0 / (n as f64 - 1.0);
    for c in &mut cov {
        *c *= inv;
    }
    Ok(cov)
}

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order with eigenvectors as the matching
/// columns of the returned (n x n, row-major) matrix. Intended for the small
/// covariance matrices this crate deals in (d <= a few hundred); convergence
/// is to machine precision in a handful of sweeps for such sizes.
pub fn jacobi_eigh(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(BeraError::DimensionMismatch {
            expected: n * n,
            got: a.len(),
        });
    }
    if n == 0 {
        return Err(BeraError::EmptyInput("eigendecomposition of 0 x 0 matrix"));
    }
    let scale = a
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-8 * scale {
                return Err(BeraError::ShapeMismatch(format!(
                    "matrix not symmetric at ({}, {})",
                    i, j
                )));
            }
        }
    }
    let mut m = a.to_vec();
    // Symmetrize exactly so rotations stay consistent.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
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
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + dst] = v[k * n + src];
        }
    }
    Ok((eigvals, vecs))
}

/// Extract eigenvector column `idx` from `jacobi_eigh` output.
pub fn eig_column(vecs: &[f64], n: usize, idx: usize) -> Vec<f64> {
    (0..n).map(|k| vecs[k * n + idx]).collect()
}
