//! Covariance estimation and Cholesky-based Mahalanobis distances.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};

/// Unbiased (divisor `N − 1`) covariance of the rows of `samples` about `mean`.
/// The result is symmetric bit for bit: only the upper triangle is computed.
pub fn covariance(samples: &Matrix, mean: &Matrix) -> Result<Matrix> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    if mean.shape() != (1, d) {
        return Err(Error::Shape(format!(
            "mean is {}x{}, expected 1x{d}",
            mean.rows(),
            mean.cols()
        )));
    }
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            samples
                .row(i)
                .iter()
                .zip(mean.row(0))
                .map(|(x, m)| x - m)
                .collect()
        })
        .collect();
    let mut cov = Matrix::zeros(d, d);
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let s: f64 = centered.iter().map(|row| row[a] * row[b]).sum();
            cov[(a, b)] = s / denom;
            cov[(b, a)] = s / denom;
        }
    }
    cov.ensure_finite("covariance")
}

/// Lower-triangular factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let (n, m) = a.shape();
        if n != m {
            return Err(Error::Shape(format!(
                "Cholesky needs a square matrix, got {n}x{m}"
            )));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let diag = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
            if !(diag > 0.0) {
                return Err(Error::Conditioning(format!(
                    "matrix is not positive definite (pivot {diag:.3e} at {j})"
                )));
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// `‖L⁻¹ v‖²`, i.e. `vᵀ A⁻¹ v`.
    pub fn inv_quadratic(&self, v: &[f64]) -> f64 {
        let n = self.lower.rows();
        debug_assert_eq!(v.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s = v[i] - dot(&self.lower.row(i)[..i], &y[..i]);
            y[i] = s / self.lower[(i, i)];
        }
        dot(&y, &y)
    }
}

/// `Σ + εI`.
pub fn shrink(sigma: &Matrix, shrinkage: f64) -> Matrix {
    let mut s = sigma.clone();
    for i in 0..s.rows().min(s.cols()) {
        s[(i, i)] += shrinkage;
    }
    s
}

/// Squared Mahalanobis distance `(f − μ)(Σ + εI)⁻¹(f − μ)ᵀ`.
pub fn mahalanobis_sq(f: &Matrix, mu: &Matrix, sigma: &Matrix, shrinkage: f64) -> Result<f64> {
    let d = mu.cols();
    if f.shape() != (1, d) || mu.rows() != 1 || sigma.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "f {}x{}, mu {}x{}, sigma {}x{} are inconsistent",
            f.rows(),
            f.cols(),
            mu.rows(),
            mu.cols(),
            sigma.rows(),
            sigma.cols()
        )));
    }
    if !(shrinkage >= 0.0) {
        return Err(Error::Domain(format!(
            "shrinkage must be non-negative, got {shrinkage}"
        )));
    }
    let chol = Cholesky::factor(&shrink(sigma, shrinkage))?;
    let diff: Vec<f64> = f.row(0).iter().zip(mu.row(0)).map(|(a, b)| a - b).collect();
    Ok(chol.inv_quadratic(&diff))
}
