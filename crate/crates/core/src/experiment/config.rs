use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::ipc::IpcConfig;
use crate::netcore::Activation;
use crate::protocol::{OmegaRate, PretextConfig, TapConfig, TiiConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Binary {
        path: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Output width of each block; the first block reads the dataset's inputs.
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Pretext training of the base weights; `null` keeps the orthogonal init.
    pub pretext: Option<PretextConfig>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32, 32, 32],
            activation: Activation::Tanh,
            pretext: Some(PretextConfig::default()),
        }
    }
}

/// Which method components are active. They form a cumulative chain:
/// `ipc` requires `ortho`, which requires `composition`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    /// Trainable `ω`; when off every adapter keeps weight 1.
    pub composition: bool,
    pub ortho: bool,
    pub ipc: bool,
    pub tii: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self::full()
    }
}

/// Stages of the cumulative ablation chain, in order.
pub const VARIANT_CHAIN: [&str; 5] = ["lora_ft", "composition", "ortho", "ipc", "tii"];

impl Variant {
    pub fn full() -> Self {
        Self {
            composition: true,
            ortho: true,
            ipc: true,
            tii: true,
        }
    }

    pub fn none() -> Self {
        Self {
            composition: false,
            ortho: false,
            ipc: false,
            tii: false,
        }
    }

    /// The variant at a named stage of the chain: `lora_ft` has every
    /// component off, each later stage adds its component to the previous.
    pub fn from_stage(name: &str) -> Result<Self> {
        let stage = VARIANT_CHAIN
            .iter()
            .position(|s| *s == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {name:?}; expected one of {VARIANT_CHAIN:?}"
                ))
            })?;
        Ok(Self {
            composition: stage >= 1,
            ortho: stage >= 2,
            ipc: stage >= 3,
            tii: stage >= 4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.ipc && !self.ortho {
            return Err(Error::Config("variant: ipc requires ortho".into()));
        }
        if self.ortho && !self.composition {
            return Err(Error::Config("variant: ortho requires composition".into()));
        }
        Ok(())
    }
}

/// A complete experiment description, read from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub rank: usize,
    pub lambda: f64,
    pub lr: f64,
    pub lr_hist_ratio: f64,
    pub omega_current_rate: OmegaRate,
    pub epochs: usize,
    pub batch_size: usize,
    pub ipc: IpcConfig,
    pub tap: TapConfig,
    pub tii: TiiConfig,
    pub variant: Variant,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            rank: train.rank,
            lambda: train.lambda,
            lr: train.lr,
            lr_hist_ratio: train.lr_hist_ratio,
            omega_current_rate: train.omega_current_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            ipc: IpcConfig::default(),
            tap: TapConfig::default(),
            tii: TiiConfig::default(),
            variant: Variant::full(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if self.model.hidden_dims.is_empty() || self.model.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "model.hidden_dims must be non-empty and positive".into(),
            ));
        }
        if let Some(p) = &self.model.pretext {
            p.validate()?;
        }
        match &self.dataset {
            DatasetSpec::Synthetic(spec) => spec.validate()?,
            DatasetSpec::Csv { test_fraction, .. } | DatasetSpec::Binary { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "test_fraction must lie in (0, 1), got {test_fraction}"
                    )));
                }
            }
        }
        self.train_config().validate()
    }

    /// Training settings with the variant switches applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_hist_ratio: self.lr_hist_ratio,
            omega_current_rate: self.omega_current_rate,
            train_omega: self.variant.composition,
            lambda: if self.variant.ortho { self.lambda } else { 0.0 },
            epochs: self.epochs,
            batch_size: self.batch_size,
            rank: self.rank,
            ipc: self.variant.ipc.then_some(self.ipc),
            tap: self.tap,
            tii: self.variant.tii.then_some(self.tii),
        }
    }
}
