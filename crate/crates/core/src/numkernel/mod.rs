//! Dense numeric layer: matrices, stable softmax, layer norm, inverted
//! dropout, a recording tape for reverse-mode gradients, and Adam.

mod adam;
mod matrix;
mod ops;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use matrix::{dot, Matrix};
pub use ops::{apply_dropout, dropout_mask, layer_norm, log_sum_exp, softmax, LAYER_NORM_EPS};
pub use tape::{CeTarget, NodeId, Tape, MASK_VALUE};
