//! Small dense Cholesky factorization and triangular solves.
//!
//! Conditioning sets hold at most a few hundred points, so an unblocked
//! lower-triangular factorization is sufficient.

use thiserror::Error;

use crate::matrix::Matrix;

/// Diagonal increment applied on the single retry after a failed
/// factorization.
pub const JITTER: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e}) even after jitter {jitter:e}")]
    NotPositiveDefinite { pivot: usize, value: f64, jitter: f64 },
}

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric positive definite matrix, reading only its
    /// lower triangle.
    pub fn factor(a: &Matrix) -> Result<Self, LinalgError> {
        let (rows, cols) = a.shape();
        if rows != cols {
            return Err(LinalgError::NotSquare { rows, cols });
        }
        Self::factor_slice(rows, a.as_slice(), 0.0)
    }

    /// Factorizes `A`, and if that fails retries once with [`JITTER`] added
    /// to the diagonal. Returns whether the jitter was needed.
    pub fn factor_with_jitter(a: &Matrix) -> Result<(Self, bool), LinalgError> {
        let (rows, cols) = a.shape();
        if rows != cols {
            return Err(LinalgError::NotSquare { rows, cols });
        }
        match Self::factor_slice(rows, a.as_slice(), 0.0) {
            Ok(c) => Ok((c, false)),
            Err(_) => {
                log::debug!("cholesky failed on {rows}x{rows} block, retrying with jitter");
                Self::factor_slice(rows, a.as_slice(), JITTER).map(|c| (c, true))
            }
        }
    }

    fn factor_slice(n: usize, a: &[f64], jitter: f64) -> Result<Self, LinalgError> {
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[j * n + j] + jitter;
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    pivot: j,
                    value: d,
                    jitter,
                });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `L z = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        x
    }

    /// `L⁻¹ b`.
    pub fn half_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>() * 2.0
    }

    pub fn factor_matrix(&self) -> Matrix {
        Matrix::new(self.n, self.n, self.l.clone()).expect("square factor")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Matrix {
        // A = B Bᵀ + n I with a fixed, non-symmetric B
        let mut b = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] = ((i * 7 + j * 3) % 5) as f64 - 2.0;
            }
        }
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b[(i, k)] * b[(j, k)];
                }
                a[(i, j)] = s + if i == j { n as f64 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn reconstructs_and_solves() {
        let a = spd(6);
        let c = Cholesky::factor(&a).unwrap();
        let l = c.factor_matrix();
        for i in 0..6 {
            for j in 0..6 {
                let s: f64 = (0..6).map(|k| l[(i, k)] * l[(j, k)]).sum();
                assert!((s - a[(i, j)]).abs() < 1e-10);
            }
        }
        let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let x = c.solve(&b);
        for i in 0..6 {
            let s: f64 = (0..6).map(|k| a[(i, k)] * x[k]).sum();
            assert!((s - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn log_det_of_diagonal() {
        let mut a = Matrix::zeros(3, 3);
        a[(0, 0)] = 2.0;
        a[(1, 1)] = 3.0;
        a[(2, 2)] = 4.0;
        let c = Cholesky::factor(&a).unwrap();
        assert!((c.log_det() - 24f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_matrix_factors() {
        let c = Cholesky::factor(&Matrix::zeros(0, 0)).unwrap();
        assert_eq!(c.dim(), 0);
        assert!(c.solve(&[]).is_empty());
        assert_eq!(c.log_det(), 0.0);
    }

    #[test]
    fn jitter_rescues_semidefinite_only_once() {
        // rank one: [[1,1],[1,1]]
        let a = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(Cholesky::factor(&a).is_err());
        let (_, jittered) = Cholesky::factor_with_jitter(&a).unwrap();
        assert!(jittered);

        let neg = Matrix::new(1, 1, vec![-1.0]).unwrap();
        let err = Cholesky::factor_with_jitter(&neg).unwrap_err();
        assert!(matches!(err, LinalgError::NotPositiveDefinite { jitter, .. } if jitter == JITTER));
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(
            Cholesky::factor(&Matrix::zeros(2, 3)),
            Err(LinalgError::NotSquare { .. })
        ));
    }
}
