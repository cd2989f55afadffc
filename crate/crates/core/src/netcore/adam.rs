//! Adam with bias correction, keyed by parameter identity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta_m: f64,
    pub beta_v: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta_m: 0.9,
            beta_v: 0.999,
            eps: 1e-8,
        }
    }
}

/// Names a trainable tensor across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    LoraA { block: usize },
    LoraB { block: usize },
    Omega { block: usize, index: usize },
    HeadWeight { task: usize },
    HeadBias { task: usize },
    BaseWeight { block: usize },
    BaseBias { block: usize },
}

/// One tensor to update: its values, its gradient, and the learning rate to use.
pub struct ParamUpdate<'a> {
    pub key: ParamKey,
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
    pub lr: f64,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamKey, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam step to every listed tensor and
    /// advances the step counter by one. Shapes are validated before any
    /// value is touched.
    pub fn step(&mut self, updates: Vec<ParamUpdate<'_>>) -> Result<()> {
        for u in &updates {
            if u.values.len() != u.grad.len() {
                return Err(Error::Usage(format!(
                    "{:?}: {} values vs {} gradient entries",
                    u.key,
                    u.values.len(),
                    u.grad.len()
                )));
            }
            if let Some(mo) = self.moments.get(&u.key) {
                if mo.m.len() != u.values.len() {
                    return Err(Error::Usage(format!(
                        "{:?} changed size between steps",
                        u.key
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            beta_m,
            beta_v,
            eps,
            ..
        } = self.config;
        let corr_m = 1.0 - beta_m.powi(t);
        let corr_v = 1.0 - beta_v.powi(t);
        for u in updates {
            let n = u.values.len();
            let mo = self.moments.entry(u.key).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for i in 0..n {
                let g = u.grad[i];
                mo.m[i] = beta_m * mo.m[i] + (1.0 - beta_m) * g;
                mo.v[i] = beta_v * mo.v[i] + (1.0 - beta_v) * g * g;
                let m_hat = mo.m[i] / corr_m;
                let v_hat = mo.v[i] / corr_v;
                u.values[i] -= u.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..5 {
            adam.step(vec![ParamUpdate {
                key: ParamKey::LoraA { block: 0 },
                values: &mut p,
                grad: &[0.0; 3],
                lr: 0.1,
            }])
            .unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 0.05;
        let mut adam = AdamState::new(AdamConfig {
            eps: 0.0,
            ..AdamConfig::with_lr(lr)
        });
        let mut p = vec![0.0, 0.0];
        adam.step(vec![ParamUpdate {
            key: ParamKey::LoraB { block: 1 },
            values: &mut p,
            grad: &[3.0, -0.25],
            lr,
        }])
        .unwrap();
        assert!((p[0] + lr).abs() < 1e-9);
        assert!((p[1] - lr).abs() < 1e-9);
    }

    #[test]
    fn mismatched_shapes_are_rejected_without_stepping() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![0.0; 2];
        let r = adam.step(vec![ParamUpdate {
            key: ParamKey::HeadBias { task: 0 },
            values: &mut p,
            grad: &[1.0],
            lr: 0.1,
        }]);
        assert!(matches!(r, Err(Error::Usage(_))));
        assert_eq!(adam.step_count(), 0);
    }
}
