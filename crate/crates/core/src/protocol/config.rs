use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipc::IpcConfig;

/// Learning rate used for the current task's `ω_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OmegaRate {
    /// The main learning rate, like the adapter factors.
    #[default]
    Main,
    /// The reduced rate used for historical `ω` entries.
    Historical,
}

/// Pseudo-feature classifier adjustment applied at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TapConfig {
    pub enabled: bool,
    pub samples_per_class: usize,
    pub epochs: usize,
}

impl Default for TapConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            samples_per_class: 256,
            epochs: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TiiMode {
    /// Every sample gets its own task prediction.
    #[default]
    PerSample,
    /// Samples are grouped into batches sharing a task; each batch takes the
    /// majority vote of its samples.
    BatchWise,
}

/// Diagonal loading added to class covariances before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    /// `ε = scale · tr(Σ)/D`, per class.
    Relative(f64),
    /// The same `ε` for every class.
    Absolute(f64),
}

impl Default for Shrinkage {
    fn default() -> Self {
        Shrinkage::Relative(1e-3)
    }
}

/// Smallest `ε` ever used, so that a class with zero spread stays invertible.
pub const SHRINKAGE_FLOOR: f64 = 1e-12;

impl Shrinkage {
    pub fn epsilon(&self, trace: f64, dim: usize) -> f64 {
        let eps = match *self {
            Shrinkage::Relative(scale) => scale * trace / dim as f64,
            Shrinkage::Absolute(eps) => eps,
        };
        eps.max(SHRINKAGE_FLOOR)
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            Shrinkage::Relative(v) | Shrinkage::Absolute(v) => v,
        };
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!(
                "tii shrinkage must be finite and non-negative, got {v}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TiiConfig {
    pub mode: TiiMode,
    pub shrinkage: Shrinkage,
}

/// Everything `train_task` and evaluation need, with variant switches
/// already resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Historical `ω` entries train at `lr_hist_ratio × lr`.
    pub lr_hist_ratio: f64,
    pub omega_current_rate: OmegaRate,
    /// When false every `ω` stays at 1.
    pub train_omega: bool,
    /// Weight of the orthogonality term; 0 disables it.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rank: usize,
    /// Importance tracking and freezing; `None` disables it.
    pub ipc: Option<IpcConfig>,
    pub tap: TapConfig,
    /// Task-ID inference; `None` evaluates every sample under the latest weights.
    pub tii: Option<TiiConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_hist_ratio: 0.01,
            omega_current_rate: OmegaRate::Main,
            train_omega: true,
            lambda: 1.0,
            epochs: 10,
            batch_size: 128,
            rank: 4,
            ipc: Some(IpcConfig::default()),
            tap: TapConfig::default(),
            tii: Some(TiiConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("lr", self.lr)?;
        if !(self.lr_hist_ratio >= 0.0 && self.lr_hist_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "lr_hist_ratio must be non-negative, got {}",
                self.lr_hist_ratio
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.rank == 0 {
            return Err(Error::Config(
                "epochs, batch_size and rank must be positive".into(),
            ));
        }
        if self.tap.enabled && (self.tap.samples_per_class == 0 || self.tap.epochs == 0) {
            return Err(Error::Config(
                "tap.samples_per_class and tap.epochs must be positive".into(),
            ));
        }
        if let Some(ipc) = &self.ipc {
            ipc.validate()?;
        }
        if let Some(tii) = &self.tii {
            tii.shrinkage.validate()?;
        }
        Ok(())
    }

    pub fn lr_hist(&self) -> f64 {
        self.lr * self.lr_hist_ratio
    }
}
