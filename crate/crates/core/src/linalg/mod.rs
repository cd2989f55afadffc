//! Dense linear-algebra kernels: products, thin QR with a reverse rule,
//! covariance, Cholesky-based Mahalanobis distance and seeded sampling.

mod cholesky;
mod matrix;
mod qr;
mod rng;

pub use cholesky::{covariance, mahalanobis_sq, shrink, Cholesky};
pub use matrix::Matrix;
pub use qr::{qr_thin, QrPair, PIVOT_TOLERANCE};
pub use rng::{gaussian_sample, RngStream};

/// `a · b`, the free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> crate::Result<Matrix> {
    a.matmul(b)
}

/// `∂L/∂A` for `(Q, R) = qr_thin(A)` given `∂L/∂Q`.
pub fn qr_backward(pair: &QrPair, q_cotangent: &Matrix) -> crate::Result<Matrix> {
    pair.backward(q_cotangent)
}
