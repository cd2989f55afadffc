use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr_thin, Matrix, RngStream};
use crate::lorac::{LocationId, LoraStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    /// `x / (1 + |x|)`, C¹ everywhere.
    Softsign,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Softsign => x / (1.0 + x.abs()),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            Activation::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
        }
    }
}

/// One linear layer `act(h W + b)`; `W` is `in × out`.
#[derive(Debug, Clone)]
pub struct Block {
    weight: Arc<Matrix>,
    bias: Matrix,
    activation: Activation,
}

impl Block {
    pub fn weight(&self) -> &Arc<Matrix> {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Stack of linear blocks whose base weights never change once built.
#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(layers: Vec<(Matrix, Matrix, Activation)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("backbone needs at least one block".into()));
        }
        for (i, (w, b, _)) in layers.iter().enumerate() {
            if b.shape() != (1, w.cols()) {
                return Err(Error::Shape(format!(
                    "block {i}: bias {}x{} vs weight {}x{}",
                    b.rows(),
                    b.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
            if i > 0 && layers[i - 1].0.cols() != w.rows() {
                return Err(Error::Shape(format!(
                    "block {i} expects input {} but previous block outputs {}",
                    w.rows(),
                    layers[i - 1].0.cols()
                )));
            }
        }
        Ok(Self {
            blocks: layers
                .into_iter()
                .map(|(w, b, activation)| Block {
                    weight: Arc::new(w),
                    bias: b,
                    activation,
                })
                .collect(),
        })
    }

    /// Square blocks with orthogonal weights (QR of a Gaussian matrix) and zero biases.
    pub fn orthogonal(dims: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("need at least input and output dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (k, d) = (win[0], win[1]);
            let tall = k.max(d);
            let short = k.min(d);
            let g = Matrix::new(
                tall,
                short,
                (0..tall * short).map(|_| rng.standard_normal()).collect(),
            )?;
            let q = qr_thin(&g)?.detach().q;
            let w = if k >= d { q } else { q.transpose() };
            layers.push((w, Matrix::zeros(1, d), activation));
        }
        Self::new(layers)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().expect("non-empty").weight.cols()
    }

    pub fn locations(&self) -> Vec<LocationId> {
        (0..self.blocks.len()).map(LocationId::new).collect()
    }

    /// One empty LoRA stack per block, sharing the base weights.
    pub fn lora_stacks(&self) -> Vec<LoraStack> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| LoraStack::new(LocationId::new(i), Arc::clone(&b.weight)))
            .collect()
    }

    /// Replaces base weights and biases, e.g. after a pretext phase.
    /// Existing stacks keep pointing at the old weights.
    pub fn with_parameters(&self, weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        if weights.len() != self.blocks.len() || biases.len() != self.blocks.len() {
            return Err(Error::Shape(
                "parameter count does not match block count".into(),
            ));
        }
        Self::new(
            weights
                .into_iter()
                .zip(biases)
                .zip(&self.blocks)
                .map(|((w, b), blk)| (w, b, blk.activation))
                .collect(),
        )
    }

    /// Features for `x` with the given effective weights.
    pub fn features(&self, effective: &[Matrix], x: &Matrix) -> Result<Matrix> {
        self.check_effective(effective)?;
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, backbone expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut h = x.clone();
        for (block, w) in self.blocks.iter().zip(effective) {
            let mut z = h.matmul(w)?;
            z.add_row_broadcast(&block.bias)?;
            h = z.map(|v| block.activation.apply(v));
        }
        Ok(h)
    }

    pub(crate) fn check_effective(&self, effective: &[Matrix]) -> Result<()> {
        if effective.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "{} effective weights for {} blocks",
                effective.len(),
                self.blocks.len()
            )));
        }
        for (i, (b, w)) in self.blocks.iter().zip(effective).enumerate() {
            if b.weight.shape() != w.shape() {
                return Err(Error::Shape(format!(
                    "block {i}: effective weight shape mismatch"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_init_has_orthonormal_weights() {
        let mut rng = RngStream::new(4);
        let bb = Backbone::orthogonal(&[6, 6, 6], Activation::Tanh, &mut rng).unwrap();
        for blk in bb.blocks() {
            let g = blk.weight().t_matmul(blk.weight()).unwrap();
            assert!(g.max_abs_diff(&Matrix::identity(6)).unwrap() < 1e-12);
        }
        assert_eq!(bb.locations().len(), 2);
    }

    #[test]
    fn dims_must_chain() {
        let layers = vec![
            (Matrix::zeros(3, 4), Matrix::zeros(1, 4), Activation::Tanh),
            (Matrix::zeros(5, 2), Matrix::zeros(1, 2), Activation::Tanh),
        ];
        assert!(matches!(Backbone::new(layers), Err(Error::Shape(_))));
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Tanh, Activation::Identity, Activation::Softsign] {
            for &x in &[-2.0, -0.3, 0.1, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }
}
