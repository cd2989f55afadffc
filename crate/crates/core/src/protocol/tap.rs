//! Classifier adjustment on pseudo features: every class contributes the same
//! number of draws from a diagonal Gaussian around its prototype, and all
//! heads are retrained jointly on them. Backbone and adapters are untouched.

use std::collections::BTreeMap;

use crate::data::make_batches;
use crate::error::{Error, Result};
use crate::linalg::{gaussian_sample, Matrix, RngStream};
use crate::netcore::{softmax_cross_entropy, AdamConfig, AdamState, ParamKey, ParamUpdate};
use crate::protocol::RunState;

/// Pseudo features and concatenated-logit labels, `samples_per_class` per class.
pub(crate) fn pseudo_features(
    state: &RunState,
    rng: &mut RngStream,
) -> Result<(Matrix, Vec<usize>)> {
    let n_heads = state.heads.len();
    if n_heads == 0 || state.stats.is_empty() {
        return Err(Error::Usage(
            "classifier adjustment needs at least one finished task".into(),
        ));
    }
    let order = state.heads.concatenated_classes(n_heads);
    let position: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let per_class = state.config.tap.samples_per_class;
    let mut blocks: Option<Matrix> = None;
    let mut labels = Vec::with_capacity(order.len() * per_class);
    for class in &order {
        let stats = state
            .stats
            .class(*class)
            .ok_or_else(|| Error::Usage(format!("class {class} has no statistics")))?;
        let draws = gaussian_sample(rng, &stats.tap_mean, &stats.tap_var, per_class)?;
        blocks = Some(match blocks {
            None => draws,
            Some(m) => stack_rows(&m, &draws)?,
        });
        labels.extend(std::iter::repeat_n(position[class], per_class));
    }
    Ok((blocks.expect("at least one class"), labels))
}

fn stack_rows(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(top.as_slice().len() + bottom.as_slice().len());
    data.extend_from_slice(top.as_slice());
    data.extend_from_slice(bottom.as_slice());
    Matrix::new(top.rows() + bottom.rows(), top.cols(), data)
}

/// Returns the number of optimizer steps taken.
pub(crate) fn adjust_classifier(state: &mut RunState, mut rng: RngStream) -> Result<u64> {
    let (features, labels) = pseudo_features(state, &mut rng)?;
    let n_heads = state.heads.len();
    let widths: Vec<usize> = (0..n_heads)
        .map(|h| state.heads.class_ids(h).len())
        .collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(state.config.lr));
    for epoch in 0..state.config.tap.epochs {
        let mut batch_rng = rng.fork(epoch as u64);
        for batch in make_batches(features.rows(), state.config.batch_size, &mut batch_rng) {
            let x = features.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let logits = state.heads.logits(&x, n_heads)?;
            let (_, dlogits) = softmax_cross_entropy(&logits, &y, None)?;
            let mut grads = Vec::with_capacity(n_heads);
            let mut offset = 0;
            for w in &widths {
                let d = dlogits.column_block(offset, offset + w);
                grads.push((x.t_matmul(&d)?, d.column_sums()));
                offset += w;
            }
            let lr = state.config.lr;
            let mut updates = Vec::with_capacity(2 * n_heads);
            for (task, (head, (gw, gb))) in
                state.heads.heads_mut().iter_mut().zip(&grads).enumerate()
            {
                updates.push(ParamUpdate {
                    key: ParamKey::HeadWeight { task },
                    values: head.weight.as_mut_slice(),
                    grad: gw.as_slice(),
                    lr,
                });
                updates.push(ParamUpdate {
                    key: ParamKey::HeadBias { task },
                    values: head.bias.as_mut_slice(),
                    grad: gb.as_slice(),
                    lr,
                });
            }
            adam.step(updates)?;
        }
    }
    Ok(adam.step_count())
}
