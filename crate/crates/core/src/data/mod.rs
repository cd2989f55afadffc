//! Task streams: the seeded split-Gaussian generator, feature-file loaders
//! and mini-batching.

mod batches;
mod files;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use batches::make_batches;
pub use files::{
    load_features_bin, load_features_csv, write_features_bin, write_features_csv, FileSample,
};
pub use synthetic::{gen_labelled_blobs, gen_synthetic_tasks, SyntheticSpec};

/// One task's classes and samples. Labels are global class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    /// 1-based task index.
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
}

impl TaskSplit {
    /// Position of a global class id within this task's classes.
    pub fn local_label(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn local_train_labels(&self) -> Vec<usize> {
        self.train_y
            .iter()
            .map(|&y| self.local_label(y).expect("labels belong to the task"))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        for (name, x, y) in [
            ("train", &self.train_x, &self.train_y),
            ("test", &self.test_x, &self.test_y),
        ] {
            if x.rows() != y.len() {
                return Err(Error::Data(format!(
                    "task {}: {} {name} rows but {} labels",
                    self.task_id,
                    x.rows(),
                    y.len()
                )));
            }
            for c in &self.class_ids {
                if !y.contains(c) {
                    return Err(Error::Data(format!(
                        "task {}: class {c} has no {name} samples",
                        self.task_id
                    )));
                }
            }
            if let Some(bad) = y.iter().find(|l| !self.class_ids.contains(l)) {
                return Err(Error::Data(format!(
                    "task {}: label {bad} is not one of its classes",
                    self.task_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskSplit>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    /// Checks task numbering, per-split consistency and class disjointness.
    pub fn new(tasks: Vec<TaskSplit>, provenance: Provenance) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::Data("dataset has no tasks".into()))?;
        let input_dim = first.train_x.cols();
        let mut seen = std::collections::BTreeSet::new();
        for (i, task) in tasks.iter().enumerate() {
            if task.task_id != i + 1 {
                return Err(Error::Data(format!(
                    "task at position {} has id {}",
                    i + 1,
                    task.task_id
                )));
            }
            if task.train_x.cols() != input_dim || task.test_x.cols() != input_dim {
                return Err(Error::Data(format!(
                    "task {} has a different input dimension",
                    task.task_id
                )));
            }
            task.validate()?;
            for c in &task.class_ids {
                if !seen.insert(*c) {
                    return Err(Error::Data(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(Self {
            num_classes: seen.len(),
            input_dim,
            tasks,
            provenance,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}
