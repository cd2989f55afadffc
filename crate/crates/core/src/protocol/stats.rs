use std::collections::BTreeMap;

use crate::data::TaskSplit;
use crate::error::{Error, Result};
use crate::linalg::{covariance, shrink, Cholesky, Matrix};
use crate::protocol::{RunState, Shrinkage, TiiMode};

/// Statistics of one class.
///
/// `tii_*` are measured under the first task's extractor and drive task-ID
/// inference; `tap_*` are measured under the class's own task extractor and
/// drive pseudo-feature sampling.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub class_id: usize,
    pub task_id: usize,
    pub tii_mean: Matrix,
    pub tii_cov: Matrix,
    pub tap_mean: Matrix,
    pub tap_var: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct TaskStats {
    classes: BTreeMap<usize, ClassStats>,
}

impl TaskStats {
    pub fn classes(&self) -> impl Iterator<Item = &ClassStats> {
        self.classes.values()
    }

    pub fn class(&self, class_id: usize) -> Option<&ClassStats> {
        self.classes.get(&class_id)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Per-column mean as a 1×D matrix.
pub(crate) fn column_mean(x: &Matrix) -> Matrix {
    x.column_sums().scale(1.0 / x.rows() as f64)
}

/// Prepared Mahalanobis classifier: one Cholesky factor per class.
pub(crate) struct TiiModel {
    classes: Vec<(usize, Matrix, Cholesky)>,
}

impl TiiModel {
    pub(crate) fn build(stats: &TaskStats, shrinkage: Shrinkage) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::Usage(
                "task-ID inference needs class statistics".into(),
            ));
        }
        let classes = stats
            .classes()
            .map(|c| {
                let dim = c.tii_cov.rows();
                let eps = shrinkage.epsilon(c.tii_cov.trace(), dim);
                Ok((
                    c.task_id,
                    c.tii_mean.clone(),
                    Cholesky::factor(&shrink(&c.tii_cov, eps))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classes })
    }

    /// Task owning the class nearest to each row of `features` (Θ₁ features).
    pub(crate) fn per_sample(&self, features: &Matrix) -> Vec<usize> {
        let mut diff = vec![0.0; features.cols()];
        (0..features.rows())
            .map(|i| {
                let f = features.row(i);
                let mut best = (f64::INFINITY, 0);
                for (task, mu, chol) in &self.classes {
                    for ((d, x), m) in diff.iter_mut().zip(f).zip(mu.as_slice()) {
                        *d = x - m;
                    }
                    let dist = chol.inv_quadratic(&diff);
                    if dist < best.0 {
                        best = (dist, *task);
                    }
                }
                best.1
            })
            .collect()
    }
}

/// Most frequent task id; ties go to the smaller id.
pub fn majority_vote(votes: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in votes {
        *counts.entry(*v).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (task, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((task, n));
        }
    }
    best.map(|b| b.0)
}

impl RunState {
    /// Fits prototypes and covariances for the classes of a finished task.
    pub fn fit_task_stats(&mut self, task: &TaskSplit) -> Result<()> {
        let t = task.task_id;
        if self.snapshots.len() < t {
            return Err(Error::Usage(format!("task {t} has not finished training")));
        }
        let theta_1 = self.snapshot_weights(1)?;
        let theta_t = self.snapshot_weights(t)?;
        let f1 = self.backbone.features(&theta_1, &task.train_x)?;
        let ft = self.backbone.features(&theta_t, &task.train_x)?;
        for &class_id in &task.class_ids {
            let rows: Vec<usize> = (0..task.train_y.len())
                .filter(|&i| task.train_y[i] == class_id)
                .collect();
            if rows.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "class {class_id} has {} training sample(s); statistics need 2",
                    rows.len()
                )));
            }
            let x1 = f1.select_rows(&rows);
            let tii_mean = column_mean(&x1);
            let tii_cov = covariance(&x1, &tii_mean)?;
            let xt = ft.select_rows(&rows);
            let tap_mean = column_mean(&xt);
            let tap_cov = covariance(&xt, &tap_mean)?;
            let dim = tap_cov.rows();
            let tap_var =
                Matrix::new(1, dim, (0..dim).map(|j| tap_cov[(j, j)].max(0.0)).collect())?;
            self.stats.classes.insert(
                class_id,
                ClassStats {
                    class_id,
                    task_id: t,
                    tii_mean,
                    tii_cov,
                    tap_mean,
                    tap_var,
                },
            );
        }
        Ok(())
    }

    /// Task prediction for each row of `inputs`. In batch-wise mode the
    /// whole input is one batch and every row receives the majority vote.
    pub fn infer_task_id(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let cfg = self
            .config
            .tii
            .ok_or_else(|| Error::Usage("task-ID inference is disabled for this run".into()))?;
        let model = TiiModel::build(&self.stats, cfg.shrinkage)?;
        let f1 = self.backbone.features(&self.snapshot_weights(1)?, inputs)?;
        let votes = model.per_sample(&f1);
        Ok(match cfg.mode {
            TiiMode::PerSample => votes,
            TiiMode::BatchWise => {
                let winner = majority_vote(&votes).expect("non-empty batch");
                vec![winner; votes.len()]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_contract() {
        assert_eq!(majority_vote(&[2, 1, 2, 1, 2, 1, 2, 1, 2]), Some(2));
        assert_eq!(majority_vote(&[3, 1, 3, 1]), Some(1));
        assert_eq!(majority_vote(&[]), None);
    }

    #[test]
    fn mean_is_arithmetic_mean() {
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 6.0]]).unwrap();
        assert_eq!(column_mean(&x).as_slice(), &[2.0, 4.0]);
    }
}
