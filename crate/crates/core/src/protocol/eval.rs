use serde::{Deserialize, Serialize};

use crate::data::TaskSplit;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::protocol::RunState;

/// Which extractor classifies a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskChoice {
    /// The current effective weights.
    Latest,
    /// The snapshot of the task predicted by task-ID inference.
    Infer,
    /// The snapshot of a fixed task, whatever the sample.
    Forced(usize),
}

/// Accuracies on the first `i` tasks' test splits after learning task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub after_task: usize,
    pub accuracies: Vec<f64>,
    /// Fraction of test samples whose task was inferred correctly, per task.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task_id_accuracy: Option<Vec<f64>>,
}

impl RunState {
    /// The extractor choice implied by the configuration.
    pub fn default_choice(&self) -> TaskChoice {
        if self.config.tii.is_some() {
            TaskChoice::Infer
        } else {
            TaskChoice::Latest
        }
    }

    /// Global class predictions using every head learned so far. With
    /// [`TaskChoice::Infer`] in batch-wise mode, `inputs` is one batch.
    pub fn predict(&self, inputs: &Matrix, choice: TaskChoice) -> Result<Vec<usize>> {
        let n = self.heads.len();
        if n == 0 {
            return Err(Error::Usage("no heads to predict with".into()));
        }
        match choice {
            TaskChoice::Latest => {
                let f = self.backbone.features(&self.effective_weights()?, inputs)?;
                self.heads.predict(&f, n)
            }
            TaskChoice::Forced(t) => {
                let f = self.backbone.features(&self.snapshot_weights(t)?, inputs)?;
                self.heads.predict(&f, n)
            }
            TaskChoice::Infer => {
                let tasks = self.infer_task_id(inputs)?;
                self.predict_with_tasks(inputs, &tasks)
            }
        }
    }

    /// Predictions when each row's extractor task is already known.
    pub fn predict_with_tasks(&self, inputs: &Matrix, tasks: &[usize]) -> Result<Vec<usize>> {
        let n = self.heads.len();
        let mut out = vec![0; inputs.rows()];
        let mut distinct: Vec<usize> = tasks.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        for t in distinct {
            let rows: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i] == t).collect();
            let x = inputs.select_rows(&rows);
            let f = self.backbone.features(&self.snapshot_weights(t)?, &x)?;
            for (r, p) in rows.iter().zip(self.heads.predict(&f, n)?) {
                out[*r] = p;
            }
        }
        Ok(out)
    }
}

/// Evaluates the test splits of `tasks` (the tasks learned so far) in chunks
/// of the configured batch size.
pub fn evaluate_row(
    state: &RunState,
    tasks: &[TaskSplit],
    choice: TaskChoice,
) -> Result<AccuracyRow> {
    let chunk = state.config().batch_size;
    let mut accuracies = Vec::with_capacity(tasks.len());
    let mut tii_acc = Vec::with_capacity(tasks.len());
    for task in tasks {
        let n = task.test_x.rows();
        let mut correct = 0usize;
        let mut tii_correct = 0usize;
        for start in (0..n).step_by(chunk) {
            let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let x = task.test_x.select_rows(&rows);
            let predictions = if choice == TaskChoice::Infer {
                let inferred = state.infer_task_id(&x)?;
                tii_correct += inferred.iter().filter(|&&t| t == task.task_id).count();
                state.predict_with_tasks(&x, &inferred)?
            } else {
                state.predict(&x, choice)?
            };
            correct += rows
                .iter()
                .zip(&predictions)
                .filter(|(r, p)| task.test_y[**r] == **p)
                .count();
        }
        accuracies.push(correct as f64 / n as f64);
        tii_acc.push(tii_correct as f64 / n as f64);
    }
    Ok(AccuracyRow {
        after_task: state.tasks_completed(),
        accuracies,
        task_id_accuracy: (choice == TaskChoice::Infer).then_some(tii_acc),
    })
}
