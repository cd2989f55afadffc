//! Sensitivity-based importance of adapted weight matrices and selection of
//! the matrices to freeze after each task.
//!
//! Per entry `w` of an effective weight with gradient `g`:
//!
//! ```text
//! I  = |w · g|
//! Ī ← β₁ Ī + (1 − β₁) I
//! U  = |I − Ī_prev|
//! Ū ← β₂ Ū + (1 − β₂) U
//! S  = Ī · Ū
//! ```
//!
//! A matrix scores the mean of `S` over its entries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lorac::LocationId;

/// What the top-p fraction is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezeScope {
    /// Fraction of the locations not frozen yet.
    #[default]
    Remaining,
    /// Fraction of all locations, capped by how many remain.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpcConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub top_p: f64,
    pub scope: FreezeScope,
}

impl Default for IpcConfig {
    fn default() -> Self {
        Self {
            beta1: 0.85,
            beta2: 0.85,
            top_p: 0.10,
            scope: FreezeScope::Remaining,
        }
    }
}

impl IpcConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!(
                    "ipc.{name} must lie in (0, 1), got {b}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(Error::Config(format!(
                "ipc.top_p must lie in [0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LocationState {
    i_bar: Matrix,
    u_bar: Matrix,
    steps: u64,
}

/// Smoothed importance state for one task. Create a fresh tracker at every
/// task boundary.
#[derive(Debug, Clone)]
pub struct ImportanceTracker {
    task_id: usize,
    state: BTreeMap<LocationId, LocationState>,
}

impl ImportanceTracker {
    pub fn new(task_id: usize) -> Self {
        Self {
            task_id,
            state: BTreeMap::new(),
        }
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn steps(&self, location: LocationId) -> u64 {
        self.state.get(&location).map_or(0, |s| s.steps)
    }

    pub fn i_bar(&self, location: LocationId) -> Option<&Matrix> {
        self.state.get(&location).map(|s| &s.i_bar)
    }

    pub fn u_bar(&self, location: LocationId) -> Option<&Matrix> {
        self.state.get(&location).map(|s| &s.u_bar)
    }

    /// Folds one mini-batch's sensitivity into the smoothed state of `location`.
    pub fn accumulate_step(
        &mut self,
        location: LocationId,
        w_eff: &Matrix,
        grad_w: &Matrix,
        cfg: &IpcConfig,
    ) -> Result<()> {
        if w_eff.shape() != grad_w.shape() {
            return Err(Error::Usage(format!(
                "{location}: weight {}x{} vs gradient {}x{}",
                w_eff.rows(),
                w_eff.cols(),
                grad_w.rows(),
                grad_w.cols()
            )));
        }
        let (rows, cols) = w_eff.shape();
        let st = self.state.entry(location).or_insert_with(|| LocationState {
            i_bar: Matrix::zeros(rows, cols),
            u_bar: Matrix::zeros(rows, cols),
            steps: 0,
        });
        if st.i_bar.shape() != w_eff.shape() {
            return Err(Error::Usage(format!(
                "{location}: shape changed between steps"
            )));
        }
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let ib = st.i_bar.as_mut_slice();
        let ub = st.u_bar.as_mut_slice();
        for (k, (w, g)) in w_eff.as_slice().iter().zip(grad_w.as_slice()).enumerate() {
            let inst = (w * g).abs();
            let prev = ib[k];
            ib[k] = b1 * prev + (1.0 - b1) * inst;
            ub[k] = b2 * ub[k] + (1.0 - b2) * (inst - prev).abs();
        }
        st.steps += 1;
        Ok(())
    }

    /// Mean of `Ī ⊙ Ū` per tracked location.
    pub fn matrix_scores(&self) -> Result<BTreeMap<LocationId, f64>> {
        if self.state.is_empty() {
            return Err(Error::Usage(
                "importance tracker has no accumulated steps".into(),
            ));
        }
        self.state
            .iter()
            .map(|(loc, st)| Ok((*loc, mean_product(&st.i_bar, &st.u_bar)?)))
            .collect()
    }
}

/// Mean over entries of `a ⊙ b`.
pub fn mean_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.inner(b)? / a.as_slice().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeSet {
    pub task_id: usize,
    pub locations: Vec<LocationId>,
    pub scores: Vec<f64>,
}

/// Number of locations to freeze for a given fraction; `ceil` with a small
/// guard so that e.g. `0.1 × 30` is 3 rather than 4.
pub fn freeze_count(top_p: f64, population: usize) -> usize {
    let raw = top_p * population as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(population)
}

/// The top-p highest scoring locations that are not frozen yet. Ties are
/// broken by location order.
pub fn select_freeze_set(
    task_id: usize,
    scores: &BTreeMap<LocationId, f64>,
    already_frozen: &BTreeSet<LocationId>,
    cfg: &IpcConfig,
) -> FreezeSet {
    let mut candidates: Vec<(LocationId, f64)> = scores
        .iter()
        .filter(|(loc, _)| !already_frozen.contains(loc))
        .map(|(loc, s)| (*loc, *s))
        .collect();
    // stable sort on a location-ordered list keeps ties in location order
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    let population = match cfg.scope {
        FreezeScope::Remaining => candidates.len(),
        FreezeScope::All => scores.len().max(already_frozen.len()),
    };
    let take = freeze_count(cfg.top_p, population).min(candidates.len());
    candidates.truncate(take);
    FreezeSet {
        task_id,
        locations: candidates.iter().map(|c| c.0).collect(),
        scores: candidates.iter().map(|c| c.1).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn zero_weight_has_zero_importance() {
        let mut t = ImportanceTracker::new(1);
        let w = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        let g = Matrix::from_rows(&[&[5.0, 1.0]]).unwrap();
        t.accumulate_step(LocationId::new(0), &w, &g, &IpcConfig::default())
            .unwrap();
        assert_eq!(t.i_bar(LocationId::new(0)).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn one_step_hand_case() {
        let mut t = ImportanceTracker::new(1);
        let loc = LocationId::new(0);
        t.accumulate_step(loc, &scalar(2.0), &scalar(-3.0), &IpcConfig::default())
            .unwrap();
        assert!((t.i_bar(loc).unwrap()[(0, 0)] - 0.9).abs() < 1e-12);
        assert!((t.u_bar(loc).unwrap()[(0, 0)] - 0.9).abs() < 1e-12);
        assert_eq!(t.steps(loc), 1);
    }

    #[test]
    fn constant_signal_converges() {
        let mut t = ImportanceTracker::new(1);
        let loc = LocationId::new(2);
        for _ in 0..500 {
            t.accumulate_step(loc, &scalar(1.5), &scalar(2.0), &IpcConfig::default())
                .unwrap();
        }
        assert!((t.i_bar(loc).unwrap()[(0, 0)] - 3.0).abs() < 1e-3);
        assert!(t.u_bar(loc).unwrap()[(0, 0)].abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut t = ImportanceTracker::new(1);
        let r = t.accumulate_step(
            LocationId::new(0),
            &Matrix::zeros(2, 2),
            &Matrix::zeros(2, 3),
            &IpcConfig::default(),
        );
        assert!(matches!(r, Err(Error::Usage(_))));
        assert!(matches!(t.matrix_scores(), Err(Error::Usage(_))));
    }

    #[test]
    fn mean_of_product_hand_case() {
        let ib = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let ub = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap();
        assert_eq!(mean_product(&ib, &ub).unwrap(), 1.0);
        assert_eq!(
            mean_product(&Matrix::filled(3, 2, 0.5), &Matrix::filled(3, 2, 0.5)).unwrap(),
            0.25
        );
    }

    fn scores(values: &[f64]) -> BTreeMap<LocationId, f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, s)| (LocationId::new(i), *s))
            .collect()
    }

    #[test]
    fn zero_fraction_selects_nothing() {
        let cfg = IpcConfig {
            top_p: 0.0,
            ..IpcConfig::default()
        };
        let fs = select_freeze_set(1, &scores(&[1.0, 2.0]), &BTreeSet::new(), &cfg);
        assert!(fs.locations.is_empty());
    }

    #[test]
    fn ten_percent_of_twenty_is_two_largest() {
        let values: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64).collect();
        let fs = select_freeze_set(3, &scores(&values), &BTreeSet::new(), &IpcConfig::default());
        assert_eq!(fs.locations.len(), 2);
        assert_eq!(fs.scores, vec![19.0, 18.0]);
    }

    #[test]
    fn ties_prefer_lower_block() {
        let cfg = IpcConfig {
            top_p: 0.2,
            ..IpcConfig::default()
        };
        let fs = select_freeze_set(
            1,
            &scores(&[0.1, 5.0, 0.2, 5.0, 0.3]),
            &BTreeSet::new(),
            &cfg,
        );
        assert_eq!(fs.locations, vec![LocationId::new(1)]);
    }

    #[test]
    fn frozen_locations_are_not_reselected() {
        let frozen: BTreeSet<_> = [LocationId::new(1)].into_iter().collect();
        let fs = select_freeze_set(2, &scores(&[0.1, 9.0, 0.5]), &frozen, &IpcConfig::default());
        assert_eq!(fs.locations, vec![LocationId::new(2)]);
    }

    #[test]
    fn ceil_guard() {
        assert_eq!(freeze_count(0.1, 30), 3);
        assert_eq!(freeze_count(0.1, 3), 1);
        assert_eq!(freeze_count(0.1, 0), 0);
        assert_eq!(freeze_count(1.0, 4), 4);
    }
}
