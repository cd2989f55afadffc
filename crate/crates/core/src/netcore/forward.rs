use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lorac::{LoraStack, StackGrads};
use crate::netcore::backbone::Backbone;
use crate::netcore::head::{softmax_cross_entropy, HeadGrad, LinearHead};

/// Everything one forward/backward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Mean softmax cross-entropy of the batch.
    pub loss: f64,
    /// Pre-head embeddings, one row per sample.
    pub features: Matrix,
    pub head: HeadGrad,
    /// `∂L/∂W_eff`, one per block.
    pub weight_grads: Vec<Matrix>,
    /// `∂L/∂b`, one per block.
    pub bias_grads: Vec<Matrix>,
    /// Chain-ruled LoRA gradients, one per block.
    pub stack_grads: Vec<StackGrads>,
}

/// Cross-entropy forward and backward through backbone, LoRA stacks and one head.
///
/// `labels` index the head's outputs (task-local class indices).
pub fn forward_backward(
    backbone: &Backbone,
    stacks: &[LoraStack],
    head: &LinearHead,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<ForwardPass> {
    if stacks.len() != backbone.blocks().len() {
        return Err(Error::Shape(format!(
            "{} LoRA stacks for {} blocks",
            stacks.len(),
            backbone.blocks().len()
        )));
    }
    let effective = stacks
        .iter()
        .map(LoraStack::compose_effective)
        .collect::<Result<Vec<_>>>()?;
    let mut pass = forward_backward_plain(backbone, &effective, head, inputs, labels)?;
    pass.stack_grads = stacks
        .iter()
        .zip(&pass.weight_grads)
        .map(|(s, g)| s.factor_grads(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(pass)
}

/// As [`forward_backward`] but with explicit effective weights and no LoRA
/// chain rule; `stack_grads` is left empty.
pub fn forward_backward_plain(
    backbone: &Backbone,
    effective: &[Matrix],
    head: &LinearHead,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<ForwardPass> {
    backbone.check_effective(effective)?;
    if inputs.rows() == 0 || labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if inputs.cols() != backbone.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, backbone expects {}",
            inputs.cols(),
            backbone.input_dim()
        )));
    }
    if head.weight.rows() != backbone.feature_dim() {
        return Err(Error::Shape(format!(
            "head expects {} features, backbone yields {}",
            head.weight.rows(),
            backbone.feature_dim()
        )));
    }

    let blocks = backbone.blocks();
    let mut pre = Vec::with_capacity(blocks.len());
    let mut post = Vec::with_capacity(blocks.len() + 1);
    post.push(inputs.clone());
    for (block, w) in blocks.iter().zip(effective) {
        let mut z = post.last().expect("non-empty").matmul(w)?;
        z.add_row_broadcast(block.bias())?;
        let h = z.map(|v| block.activation().apply(v));
        pre.push(z);
        post.push(h);
    }
    let features = post.pop().expect("features");

    let logits = head.logits(&features)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels, None)?;
    let head_grad = HeadGrad {
        weight: features.t_matmul(&dlogits)?,
        bias: dlogits.column_sums(),
    };

    let mut dh = dlogits.matmul_t(&head.weight)?;
    let mut weight_grads = vec![None; blocks.len()];
    let mut bias_grads = vec![None; blocks.len()];
    for i in (0..blocks.len()).rev() {
        let act = blocks[i].activation();
        let dz = dh.zip_map(&pre[i], |g, z| g * act.derivative(z))?;
        weight_grads[i] = Some(post[i].t_matmul(&dz)?);
        bias_grads[i] = Some(dz.column_sums());
        if i > 0 {
            dh = dz.matmul_t(&effective[i])?;
        }
    }

    Ok(ForwardPass {
        loss,
        features,
        head: head_grad,
        weight_grads: weight_grads
            .into_iter()
            .map(|g| g.expect("filled"))
            .collect(),
        bias_grads: bias_grads.into_iter().map(|g| g.expect("filled")).collect(),
        stack_grads: Vec::new(),
    })
}
