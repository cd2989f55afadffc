//! Average accuracy and forgetting over the lower-triangular accuracy matrix
//! `a[i][τ]`: accuracy on task `τ` after learning task `i` (both 1-based).
//!
//! ```text
//! A = (1/T) Σ_τ a[T][τ]
//! F = (1/(T−1)) Σ_{τ<T} max_{i<T} (a[i][τ] − a[T][τ])
//! ```
//!
//! Negative terms of `F` (tasks that improved) are kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Builds a matrix from already-known rows; row `i` (0-based) must hold
    /// `i + 1` values in `[0, 1]`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::Usage(format!(
                "row {expected} needs {expected} entries, got {}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Tasks covered so far.
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `a[i][τ]`, 1-based.
    pub fn get(&self, i: usize, tau: usize) -> Option<f64> {
        self.rows
            .get(i.checked_sub(1)?)?
            .get(tau.checked_sub(1)?)
            .copied()
    }

    /// Populated cells; `T(T+1)/2` for a complete matrix.
    pub fn populated(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// True when the matrix has `expected_tasks` complete rows.
    pub fn is_complete(&self, expected_tasks: usize) -> bool {
        self.rows.len() == expected_tasks
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl TryFrom<Vec<Vec<f64>>> for AccuracyMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<AccuracyMatrix> for Vec<Vec<f64>> {
    fn from(m: AccuracyMatrix) -> Self {
        m.rows
    }
}

/// Mean accuracy over the last row.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let last = m
        .rows
        .last()
        .ok_or_else(|| Error::Usage("accuracy matrix is empty".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Forgetting; undefined for a single task.
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t == 0 {
        return Err(Error::Usage("accuracy matrix is empty".into()));
    }
    if t == 1 {
        return Err(Error::Domain(
            "forgetting is undefined for a single task".into(),
        ));
    }
    let last = &m.rows[t - 1];
    let mut total = 0.0;
    for tau in 0..t - 1 {
        let best = (tau..t - 1)
            .map(|i| m.rows[i][tau] - last[tau])
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / (t - 1) as f64)
}

/// `(A, F)` for a matrix expected to hold `expected_tasks` rows.
pub fn compute_metrics(m: &AccuracyMatrix, expected_tasks: usize) -> Result<(f64, f64)> {
    if !m.is_complete(expected_tasks) {
        return Err(Error::Usage(format!(
            "accuracy matrix has {} of {expected_tasks} rows",
            m.tasks()
        )));
    }
    Ok((average_accuracy(m)?, forgetting(m)?))
}
