use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Affine classifier `f Φ + c` over one task's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearHead {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(feature_dim, classes),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = features.matmul(&self.weight)?;
        z.add_row_broadcast(&self.bias)?;
        Ok(z)
    }
}

#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// One head per learned task, in task order, with the global class ids each
/// head's outputs stand for.
#[derive(Debug, Clone, Default)]
pub struct HeadBank {
    heads: Vec<LinearHead>,
    classes: Vec<Vec<usize>>,
}

impl HeadBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, head: LinearHead, class_ids: Vec<usize>) -> Result<()> {
        if head.classes() != class_ids.len() {
            return Err(Error::Shape(format!(
                "head has {} outputs for {} classes",
                head.classes(),
                class_ids.len()
            )));
        }
        self.heads.push(head);
        self.classes.push(class_ids);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn heads(&self) -> &[LinearHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [LinearHead] {
        &mut self.heads
    }

    pub fn head(&self, task_index: usize) -> &LinearHead {
        &self.heads[task_index]
    }

    pub fn class_ids(&self, task_index: usize) -> &[usize] {
        &self.classes[task_index]
    }

    /// Global class ids in concatenated-logit order for the first `n` heads.
    pub fn concatenated_classes(&self, n: usize) -> Vec<usize> {
        self.classes[..n].iter().flatten().copied().collect()
    }

    /// Logits of the first `n` heads side by side.
    pub fn logits(&self, features: &Matrix, n: usize) -> Result<Matrix> {
        if n == 0 || n > self.heads.len() {
            return Err(Error::Usage(format!(
                "asked for {n} heads, bank has {}",
                self.heads.len()
            )));
        }
        let mut out = self.heads[0].logits(features)?;
        for head in &self.heads[1..n] {
            out = out.hcat(&head.logits(features)?)?;
        }
        Ok(out)
    }

    /// Global class id with the largest logit among the first `n` heads, per row.
    pub fn predict(&self, features: &Matrix, n: usize) -> Result<Vec<usize>> {
        let logits = self.logits(features, n)?;
        let ids = self.concatenated_classes(n);
        Ok((0..logits.rows())
            .map(|i| ids[argmax(logits.row(i))])
            .collect())
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy of `logits` against integer `labels`.
///
/// Per-sample losses are weighted (uniform `1/n` when `weights` is `None`),
/// sorted and then summed, so the total does not depend on batch order.
/// Returns the loss and `∂loss/∂logits`.
pub fn softmax_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Matrix)> {
    let (n, m) = logits.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Shape(format!("{} weights for {n} rows", w.len())));
        }
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {m} classes"
        )));
    }
    let uniform = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, m);
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let w = weights.map_or(uniform, |w| w[i]);
        terms.push(w * (log_z - row[labels[i]]));
        let g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = w * (v - log_z).exp();
        }
        g[labels[i]] -= w;
    }
    terms.sort_by(f64::total_cmp);
    let loss = terms.iter().sum();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_m() {
        let logits = Matrix::zeros(5, 7);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 6], None).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3], None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn loss_is_order_independent() {
        let logits =
            Matrix::from_rows(&[&[0.1, 2.0, -1.0], &[3.0, 0.2, 0.0], &[-0.5, 0.5, 1e-3]]).unwrap();
        let (a, _) = softmax_cross_entropy(&logits, &[1, 0, 2], None).unwrap();
        let perm = logits.select_rows(&[2, 0, 1]);
        let (b, _) = softmax_cross_entropy(&perm, &[2, 1, 0], None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn first_maximum_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }
}
