//! Optional pretext phase that gives the base weights something worth
//! preserving: plain training of all block weights and biases on a separate
//! set of synthetic classes before the task stream starts.

use serde::{Deserialize, Serialize};

use crate::data::{gen_labelled_blobs, make_batches};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};
use crate::netcore::{
    forward_backward_plain, AdamConfig, AdamState, Backbone, LinearHead, ParamKey, ParamUpdate,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub class_sep: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            classes: 16,
            samples_per_class: 100,
            class_sep: 6.0,
            epochs: 3,
            lr: 0.001,
            batch_size: 128,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2
            || self.samples_per_class == 0
            || self.epochs == 0
            || self.batch_size == 0
        {
            return Err(Error::Config(
                "pretext needs at least 2 classes and positive samples, epochs and batch size"
                    .into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.class_sep >= 0.0 && self.class_sep.is_finite())
        {
            return Err(Error::Config(
                "pretext lr must be positive and class_sep non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Returns a backbone whose weights and biases were trained on the pretext
/// classes. The input backbone is left unchanged.
pub fn pretrain_backbone(
    backbone: &Backbone,
    cfg: &PretextConfig,
    rng: &mut RngStream,
) -> Result<Backbone> {
    cfg.validate()?;
    let (x, y) = gen_labelled_blobs(
        rng,
        cfg.classes,
        cfg.samples_per_class,
        backbone.input_dim(),
        cfg.class_sep,
    )?;
    let mut weights: Vec<Matrix> = backbone
        .blocks()
        .iter()
        .map(|b| (**b.weight()).clone())
        .collect();
    let mut biases: Vec<Matrix> = backbone.blocks().iter().map(|b| b.bias().clone()).collect();
    let mut head = LinearHead::zeros(backbone.feature_dim(), cfg.classes);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    for epoch in 0..cfg.epochs {
        let mut batch_rng = rng.fork(epoch as u64);
        for batch in make_batches(x.rows(), cfg.batch_size, &mut batch_rng) {
            let xb = x.select_rows(&batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let pass = forward_backward_plain(backbone, &weights, &head, &xb, &yb)?;
            let mut updates = Vec::with_capacity(2 * weights.len() + 2);
            for (block, ((w, b), (gw, gb))) in weights
                .iter_mut()
                .zip(biases.iter_mut())
                .zip(pass.weight_grads.iter().zip(&pass.bias_grads))
                .enumerate()
            {
                updates.push(ParamUpdate {
                    key: ParamKey::BaseWeight { block },
                    values: w.as_mut_slice(),
                    grad: gw.as_slice(),
                    lr: cfg.lr,
                });
                updates.push(ParamUpdate {
                    key: ParamKey::BaseBias { block },
                    values: b.as_mut_slice(),
                    grad: gb.as_slice(),
                    lr: cfg.lr,
                });
            }
            updates.push(ParamUpdate {
                key: ParamKey::HeadWeight { task: 0 },
                values: head.weight.as_mut_slice(),
                grad: pass.head.weight.as_slice(),
                lr: cfg.lr,
            });
            updates.push(ParamUpdate {
                key: ParamKey::HeadBias { task: 0 },
                values: head.bias.as_mut_slice(),
                grad: pass.head.bias.as_slice(),
                lr: cfg.lr,
            });
            adam.step(updates)?;
        }
    }
    backbone.with_parameters(weights, biases)
}
