//! Hand-derived gradients for the toy backbone: linear blocks with a smooth
//! nonlinearity, per-task linear heads, softmax cross-entropy and Adam.

mod adam;
mod backbone;
mod forward;
mod gradcheck;
mod head;

pub use adam::{AdamConfig, AdamState, ParamKey, ParamUpdate};
pub use backbone::{Activation, Backbone, Block};
pub use forward::{forward_backward, forward_backward_plain, ForwardPass};
pub use gradcheck::{finite_diff_check, GradCheckReport, ParamBlock, ParamCheck};
pub use head::{argmax, softmax_cross_entropy, HeadBank, HeadGrad, LinearHead};
