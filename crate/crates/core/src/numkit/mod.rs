//! Dense linear algebra primitives and deterministic seeded randomness.
//!
//! Everything here is sized for desk-scale latent dimensions (d ≤ 256):
//! row-major storage, textbook Cholesky with explicit pivot tolerances,
//! and symmetric eigendecomposition for matrix square roots. Accuracy and
//! determinism take priority over speed.

mod rng;

pub use rng::RngStream;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance below which a Cholesky pivot or an eigenvalue is
/// treated as a genuine negative rather than rounding noise.
pub const PSD_TOL: f64 = 1e-8;

/// Symmetry tolerance for matrices that must be symmetric.
pub const SYM_TOL: f64 = 1e-10;

/// Dense row-major matrix of `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries. Panics if the entry count
    /// does not match `rows * cols` or an entry is non-finite; shapes are
    /// programmer-controlled, so this is a contract violation rather than
    /// a recoverable error.
    pub fn from_rows(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        assert_eq!(
            entries.len(),
            rows * cols,
            "entry count {} does not match {}x{}",
            entries.len(),
            rows,
            cols
        );
        assert!(
            entries.iter().all(|v| v.is_finite()),
            "matrix entries must be finite"
        );
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self::from_rows(rows, cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.cols + j] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.entries[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a + b)
            .collect();
        Matrix::from_rows(self.rows, self.cols, entries)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a - b)
            .collect();
        Matrix::from_rows(self.rows, self.cols, entries)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_rows(
            self.rows,
            self.cols,
            self.entries.iter().map(|v| v * s).collect(),
        )
    }

    /// Adds `ridge` to every diagonal entry.
    pub fn add_ridge(&self, ridge: f64) -> Matrix {
        assert!(self.is_square());
        let mut out = self.clone();
        for i in 0..self.rows {
            out.set(i, i, out.get(i, i) + ridge);
        }
        out
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Returns `(M + M^T) / 2`, removing rounding asymmetry.
    pub fn symmetrize(&self) -> Matrix {
        assert!(self.is_square());
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::DimMismatch {
                context: "symmetric matrix must be square",
                left: self.rows,
                right: self.cols,
            });
        }
        let tol = SYM_TOL * self.max_abs().max(1.0);
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        if worst > tol {
            return Err(Error::Asymmetric {
                max_abs_diff: worst,
            });
        }
        Ok(())
    }
}

/// Cholesky factorization `M = L L^T` of a symmetric PSD matrix.
///
/// Pivots inside `[-tol, 0]` are clamped to zero so that exactly singular
/// PSD inputs (a zero covariance, say) factor cleanly; pivots below the
/// tolerance report `NotPsd`. Callers working with estimated covariances
/// are expected to ridge them first.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    m.check_symmetric()?;
    let n = m.rows();
    let scale = m.max_abs().max(1.0);
    let tol = PSD_TOL * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = m.get(j, j);
        for k in 0..j {
            pivot -= l.get(j, k) * l.get(j, k);
        }
        if pivot < -tol {
            return Err(Error::NotPsd {
                context: "cholesky pivot",
                value: pivot,
            });
        }
        let ljj = pivot.max(0.0).sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            // A zero pivot on a PSD matrix forces the column below it to
            // zero as well.
            l.set(i, j, if ljj > 0.0 { s / ljj } else { 0.0 });
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l.get(i, k) * x[k];
        }
        let d = l.get(i, i);
        if d == 0.0 {
            return Err(Error::NotPsd {
                context: "singular triangular solve",
                value: 0.0,
            });
        }
        x[i] = s / d;
    }
    Ok(x)
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        let d = l.get(i, i);
        if d == 0.0 {
            return Err(Error::NotPsd {
                context: "singular triangular solve",
                value: 0.0,
            });
        }
        x[i] = s / d;
    }
    Ok(x)
}

/// Solves `M x = b` given the Cholesky factor `L` of `M`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    solve_lower_transpose(l, &solve_lower(l, b)?)
}

/// Inverse of a PSD matrix via its Cholesky factor.
pub fn cholesky_inverse(l: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = cholesky_solve(l, &e)?;
        e[j] = 0.0;
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    Ok(inv.symmetrize())
}

/// Symmetric eigendecomposition, eigenvalues ascending.
///
/// Returns `(eigenvalues, V)` with `M = V diag(λ) V^T`; columns of `V` are
/// the eigenvectors. Backed by nalgebra's tridiagonal-QR routine.
pub fn sym_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    m.check_symmetric()?;
    let n = m.rows();
    let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let eig = dm.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((values, vectors))
}

fn psd_eigen_map(m: &Matrix, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    let (values, vectors) = sym_eigen(m)?;
    let scale = values.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let tol = PSD_TOL * scale;
    if let Some(&min) = values.first() {
        if min < -tol {
            return Err(Error::NotPsd {
                context: "eigenvalue",
                value: min,
            });
        }
    }
    let mapped: Vec<f64> = values.iter().map(|&v| f(v.max(0.0))).collect();
    let n = m.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += vectors.get(i, k) * mapped[k] * vectors.get(j, k);
            }
            out.set(i, j, s);
        }
    }
    Ok(out.symmetrize())
}

/// Symmetric PSD square root: returns `S` with `S S = M`.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    psd_eigen_map(m, f64::sqrt)
}

/// Inverse PSD square root with an eigenvalue floor guarding against
/// near-singular estimated covariances.
pub fn psd_inv_sqrt(m: &Matrix, floor: f64) -> Result<Matrix> {
    psd_eigen_map(m, |v| 1.0 / v.max(floor).sqrt())
}
