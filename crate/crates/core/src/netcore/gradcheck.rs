//! Central-difference gradient checking.

use serde::Serialize;

/// Relative error of one named parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.rel_error <= self.tolerance)
    }
}

/// A named flat parameter block with its analytic gradient.
pub struct ParamBlock {
    pub name: String,
    pub values: Vec<f64>,
    pub analytic: Vec<f64>,
}

/// Compares analytic gradients against central differences of `loss`.
///
/// `loss` receives every block's values (in order) and returns the scalar
/// objective. Each coordinate is perturbed by `±step` in turn.
pub fn finite_diff_check<F>(
    mut loss: F,
    blocks: &[ParamBlock],
    step: f64,
    tol: f64,
) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut point: Vec<Vec<f64>> = blocks.iter().map(|b| b.values.clone()).collect();
    let mut params = Vec::with_capacity(blocks.len());
    for (bi, block) in blocks.iter().enumerate() {
        let mut numeric = Vec::with_capacity(block.values.len());
        for j in 0..block.values.len() {
            let orig = point[bi][j];
            point[bi][j] = orig + step;
            let up = loss(&point);
            point[bi][j] = orig - step;
            let down = loss(&point);
            point[bi][j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        params.push(compare(&block.name, &block.analytic, &numeric));
    }
    GradCheckReport {
        params,
        tolerance: tol,
    }
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> ParamCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    let rel_error = if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    };
    ParamCheck {
        name: name.to_string(),
        rel_error,
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quartic(p: &[Vec<f64>]) -> f64 {
        let x = &p[0];
        x[0] * x[0] + 3.0 * x[0] * x[1] - 2.0 * x[1] * x[1] * x[1]
    }

    #[test]
    fn polynomial_gradient_checks_tightly() {
        let x = vec![0.7, -1.2];
        let analytic = vec![2.0 * x[0] + 3.0 * x[1], 3.0 * x[0] - 6.0 * x[1] * x[1]];
        let report = finite_diff_check(
            quartic,
            &[ParamBlock {
                name: "x".into(),
                values: x,
                analytic,
            }],
            1e-4,
            1e-8,
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = vec![0.7, -1.2];
        let analytic = vec![
            2.0 * (2.0 * x[0] + 3.0 * x[1]),
            2.0 * (3.0 * x[0] - 6.0 * x[1] * x[1]),
        ];
        let report = finite_diff_check(
            quartic,
            &[ParamBlock {
                name: "x".into(),
                values: x,
                analytic,
            }],
            1e-4,
            1e-5,
        );
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.4);
    }
}
