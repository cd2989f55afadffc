use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, TaskSplit};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Training samples per class.
    pub n_train: usize,
    /// Test samples per class.
    pub n_test: usize,
    pub input_dim: usize,
    /// Radius of the sphere class means are drawn from.
    pub class_sep: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tasks: 6,
            classes_per_task: 4,
            n_train: 200,
            n_test: 50,
            input_dim: 32,
            class_sep: 6.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0
            || self.classes_per_task == 0
            || self.n_train == 0
            || self.n_test == 0
            || self.input_dim == 0
        {
            return Err(Error::Config(
                "synthetic dataset counts must be positive".into(),
            ));
        }
        if !(self.class_sep >= 0.0 && self.class_sep.is_finite()) {
            return Err(Error::Config(format!(
                "class_sep must be a finite non-negative number, got {}",
                self.class_sep
            )));
        }
        Ok(())
    }
}

fn sphere_point(rng: &mut RngStream, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| radius * x / norm).collect();
        }
    }
}

fn blob(rng: &mut RngStream, mean: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * mean.len());
    for _ in 0..n {
        out.extend(mean.iter().map(|m| m + rng.standard_normal()));
    }
    out
}

/// Unit-variance isotropic blobs around `classes` random means on a sphere of
/// radius `class_sep`. Returns samples grouped by class, labels `0..classes`.
pub fn gen_labelled_blobs(
    rng: &mut RngStream,
    classes: usize,
    n_per_class: usize,
    input_dim: usize,
    class_sep: f64,
) -> Result<(Matrix, Vec<usize>)> {
    let mut data = Vec::with_capacity(classes * n_per_class * input_dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        let mean = sphere_point(rng, input_dim, class_sep);
        data.extend(blob(rng, &mean, n_per_class));
        labels.extend(std::iter::repeat_n(c, n_per_class));
    }
    Ok((Matrix::new(classes * n_per_class, input_dim, data)?, labels))
}

/// Class-incremental stream of Gaussian-blob tasks. Task `t` (1-based) owns
/// global classes `(t−1)·M .. t·M`.
pub fn gen_synthetic_tasks(rng: &mut RngStream, spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let m = spec.classes_per_task;
    let d = spec.input_dim;
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let class_ids: Vec<usize> = (t * m..(t + 1) * m).collect();
        let means: Vec<Vec<f64>> = class_ids
            .iter()
            .map(|_| sphere_point(rng, d, spec.class_sep))
            .collect();
        let mut train = Vec::new();
        let mut train_y = Vec::new();
        let mut test = Vec::new();
        let mut test_y = Vec::new();
        for (mean, &c) in means.iter().zip(&class_ids) {
            train.extend(blob(rng, mean, spec.n_train));
            train_y.extend(std::iter::repeat_n(c, spec.n_train));
            test.extend(blob(rng, mean, spec.n_test));
            test_y.extend(std::iter::repeat_n(c, spec.n_test));
        }
        tasks.push(TaskSplit {
            task_id: t + 1,
            class_ids,
            train_x: Matrix::new(train_y.len(), d, train)?,
            train_y,
            test_x: Matrix::new(test_y.len(), d, test)?,
            test_y,
        });
    }
    Dataset::new(tasks, Provenance::Synthetic)
}
