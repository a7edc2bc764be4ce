//! ARD Matérn-5/2 covariance.
//!
//! `k(x, x') = σ² (1 + √5 r + 5/3 r²) exp(−√5 r)` with
//! `r² = Σ_d ((x_d − x'_d) / λ_d)²`.
//!
//! Hyperparameters live in log space. Derivatives with respect to the log
//! lengthscales are written in terms of the scaled squared differences so
//! that they stay finite at `r = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("input dimension {found} does not match {expected} lengthscales")]
    Dimension { expected: usize, found: usize },
    #[error("hyperparameters must exponentiate to positive finite values")]
    InvalidParams,
}

/// Kernel and likelihood hyperparameters of one Vecchia GP, in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_output_var: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise_var: f64,
}

impl KernelParams {
    pub fn new(output_var: f64, lengthscales: &[f64], noise_var: f64) -> Result<Self, KernelError> {
        let p = Self {
            log_output_var: output_var.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_noise_var: noise_var.ln(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit output variance and lengthscales, noise variance 0.01.
    pub fn isotropic(dim: usize) -> Self {
        Self {
            log_output_var: 0.0,
            log_lengthscales: vec![0.0; dim],
            log_noise_var: 0.01f64.ln(),
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let ok = |v: f64| {
            let e = v.exp();
            v.is_finite() && e.is_finite() && e > 0.0
        };
        if ok(self.log_output_var)
            && ok(self.log_noise_var)
            && self.log_lengthscales.iter().all(|&l| ok(l))
        {
            Ok(())
        } else {
            Err(KernelError::InvalidParams)
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn output_var(&self) -> f64 {
        self.log_output_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    /// Number of free parameters, `d + 2`.
    pub fn len(&self) -> usize {
        self.dim() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattened as `(log σ², log λ_1..log λ_d, log τ²)`, the same layout as
    /// [`grad_logparams`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.log_output_var);
        v.extend_from_slice(&self.log_lengthscales);
        v.push(self.log_noise_var);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= 2, "need at least output and noise variance");
        Self {
            log_output_var: v[0],
            log_lengthscales: v[1..v.len() - 1].to_vec(),
            log_noise_var: v[v.len() - 1],
        }
    }

    pub(crate) fn inv_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-l).exp()).collect()
    }

    fn check(&self, a: &[f64], b: &[f64]) -> Result<(), KernelError> {
        for x in [a, b] {
            if x.len() != self.dim() {
                return Err(KernelError::Dimension {
                    expected: self.dim(),
                    found: x.len(),
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn scaled_sq_dist(a: &[f64], b: &[f64], inv_ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(inv_ls)
        .map(|((x, y), il)| {
            let s = (x - y) * il;
            s * s
        })
        .sum()
}

#[inline]
fn matern52(r2: f64, output_var: f64) -> f64 {
    let r = r2.sqrt();
    output_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

/// Kernel value for precomputed inverse lengthscales; no dimension checks.
#[inline]
pub(crate) fn eval_unchecked(a: &[f64], b: &[f64], output_var: f64, inv_ls: &[f64]) -> f64 {
    matern52(scaled_sq_dist(a, b, inv_ls), output_var)
}

/// Covariance between two points.
pub fn k(x: &[f64], x2: &[f64], p: &KernelParams) -> Result<f64, KernelError> {
    p.check(x, x2)?;
    Ok(eval_unchecked(x, x2, p.output_var(), &p.inv_lengthscales()))
}

/// Cross-covariance block `K(A, B)`.
pub fn gram(a: &Matrix, b: &Matrix, p: &KernelParams) -> Result<Matrix, KernelError> {
    for m in [a, b] {
        if m.cols() != p.dim() {
            return Err(KernelError::Dimension {
                expected: p.dim(),
                found: m.cols(),
            });
        }
    }
    let (s2, il) = (p.output_var(), p.inv_lengthscales());
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = eval_unchecked(ai, b.row(j), s2, &il);
        }
    }
    Ok(out)
}

/// Symmetric block `K(A, A)`, optionally with `τ²` added to the diagonal.
pub fn gram_self(a: &Matrix, p: &KernelParams, add_noise_diag: bool) -> Result<Matrix, KernelError> {
    if a.cols() != p.dim() {
        return Err(KernelError::Dimension {
            expected: p.dim(),
            found: a.cols(),
        });
    }
    let (s2, il) = (p.output_var(), p.inv_lengthscales());
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    let noise = if add_noise_diag { p.noise_var() } else { 0.0 };
    for i in 0..n {
        out[(i, i)] = s2 + noise;
        for j in 0..i {
            let v = eval_unchecked(a.row(i), a.row(j), s2, &il);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Writes `∂k/∂(log σ², log λ_1..log λ_d)` into `out[..d+1]` and returns
/// `k`. The caller owns the noise slot.
#[inline]
pub(crate) fn grad_unchecked(
    a: &[f64],
    b: &[f64],
    output_var: f64,
    inv_ls: &[f64],
    out: &mut [f64],
) -> f64 {
    let r2 = scaled_sq_dist(a, b, inv_ls);
    let r = r2.sqrt();
    let e = (-SQRT5 * r).exp();
    let value = output_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * e;
    out[0] = value;
    // ∂k/∂log λ_d = (5/3) σ² (1 + √5 r) e^{−√5 r} s_d², s_d = (x_d − x'_d)/λ_d
    let c = 5.0 / 3.0 * output_var * (1.0 + SQRT5 * r) * e;
    for (d, ((x, y), il)) in a.iter().zip(b).zip(inv_ls).enumerate() {
        let s = (x - y) * il;
        out[d + 1] = c * s * s;
    }
    value
}

/// Gradient of `k(x, x2)` with respect to `(log σ², log λ_1..log λ_d, log τ²)`.
/// The noise component is always zero: `τ²` only enters through diagonals.
pub fn grad_logparams(x: &[f64], x2: &[f64], p: &KernelParams) -> Result<Vec<f64>, KernelError> {
    p.check(x, x2)?;
    let mut g = vec![0.0; p.len()];
    grad_unchecked(x, x2, p.output_var(), &p.inv_lengthscales(), &mut g);
    Ok(g)
}
