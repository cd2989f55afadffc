//! Thin QR by modified Gram–Schmidt, with a tape for reverse-mode gradients.
//!
//! The forward pass records the working matrix before every elimination
//! stage. The reverse pass replays those stages backwards and differentiates
//! each elementary operation (normalisation, projection coefficient, column
//! update), so the gradient is exact for the algorithm actually executed.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};

/// Smallest admissible column norm during elimination.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct QrTape {
    /// Working columns before stage `k`, stored column-major (`stages[k][j]`).
    stages: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct QrPair {
    pub q: Matrix,
    pub r: Matrix,
    tape: Option<QrTape>,
}

impl QrPair {
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    /// Drops the recorded intermediates, keeping only `q` and `r`.
    pub fn detach(mut self) -> Self {
        self.tape = None;
        self
    }

    /// Gradient of a scalar loss with respect to the factorised input, given
    /// `∂L/∂Q`.
    pub fn backward(&self, q_cotangent: &Matrix) -> Result<Matrix> {
        self.backward_full(q_cotangent, None)
    }

    /// As [`QrPair::backward`], optionally also propagating `∂L/∂R`.
    pub fn backward_full(
        &self,
        q_cotangent: &Matrix,
        r_cotangent: Option<&Matrix>,
    ) -> Result<Matrix> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::Usage("QR pair has no tape; factorise with qr_thin".into()))?;
        let (m, n) = self.q.shape();
        if q_cotangent.shape() != (m, n) {
            return Err(Error::Shape(format!(
                "Q cotangent is {}x{}, expected {m}x{n}",
                q_cotangent.rows(),
                q_cotangent.cols()
            )));
        }
        if let Some(dr) = r_cotangent {
            if dr.shape() != (n, n) {
                return Err(Error::Shape(format!(
                    "R cotangent is {}x{}, expected {n}x{n}",
                    dr.rows(),
                    dr.cols()
                )));
            }
        }
        let dr_at = |i: usize, j: usize| r_cotangent.map_or(0.0, |dr| dr[(i, j)]);

        let q_cols: Vec<Vec<f64>> = (0..n).map(|k| self.q.column(k)).collect();
        let mut dq_cols: Vec<Vec<f64>> = (0..n).map(|k| q_cotangent.column(k)).collect();
        // Adjoint of the working columns; becomes ∂L/∂A once every stage is undone.
        let mut dv = vec![vec![0.0; m]; n];

        for k in (0..n).rev() {
            let q_k = &q_cols[k];
            let stage = &tape.stages[k];
            for j in (k + 1..n).rev() {
                let r_kj = self.r[(k, j)];
                // v_j ← v_j − r_kj q_k
                let g = &dv[j];
                let dr_kj = dr_at(k, j) - dot(q_k, g);
                let v_before = &stage[j];
                for i in 0..m {
                    dq_cols[k][i] += -r_kj * g[i] + dr_kj * v_before[i];
                }
                // r_kj = q_k · v_j (adds to the adjoint of v_j before the update)
                for i in 0..m {
                    dv[j][i] += dr_kj * q_k[i];
                }
            }
            // q_k = v_k / ‖v_k‖, r_kk = ‖v_k‖
            let rho = self.r[(k, k)];
            let dq = &dq_cols[k];
            let proj = dot(q_k, dq);
            let drr = dr_at(k, k);
            for i in 0..m {
                dv[k][i] += (dq[i] - q_k[i] * proj) / rho + drr * q_k[i];
            }
        }

        let mut grad = Matrix::zeros(m, n);
        for (j, col) in dv.iter().enumerate() {
            grad.set_column(j, col);
        }
        grad.ensure_finite("qr_backward")
    }
}

/// Thin QR of a tall, full-column-rank matrix. `R` has a strictly positive
/// diagonal, which makes the factorisation unique.
pub fn qr_thin(a: &Matrix) -> Result<QrPair> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::Shape(format!(
            "qr_thin needs rows >= cols, got {m}x{n}"
        )));
    }
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut r = Matrix::zeros(n, n);
    let mut stages = Vec::with_capacity(n);

    for k in 0..n {
        stages.push(v.clone());
        let norm = dot(&v[k], &v[k]).sqrt();
        if !(norm >= PIVOT_TOLERANCE) {
            return Err(Error::Degenerate(format!(
                "column {k} has pivot {norm:.3e} below {PIVOT_TOLERANCE:e}; input is rank deficient"
            )));
        }
        r[(k, k)] = norm;
        let inv = 1.0 / norm;
        v[k].iter_mut().for_each(|x| *x *= inv);
        let (head, tail) = v.split_at_mut(k + 1);
        let q_k = &head[k];
        for (offset, col) in tail.iter_mut().enumerate() {
            let r_kj = dot(q_k, col);
            r[(k, k + 1 + offset)] = r_kj;
            for (c, q) in col.iter_mut().zip(q_k) {
                *c -= r_kj * q;
            }
        }
    }

    let mut q = Matrix::zeros(m, n);
    for (j, col) in v.iter().enumerate() {
        q.set_column(j, col);
    }
    Ok(QrPair {
        q: q.ensure_finite("qr_thin")?,
        r: r.ensure_finite("qr_thin")?,
        tape: Some(QrTape { stages }),
    })
}
