//! Differentiable numeric core: tensors, taped reverse mode, Adam and
//! finite-difference checks. Everything runs in f64.

mod gradcheck;
mod params;
mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, gradcheck_detailed, GradcheckEntry, GRADCHECK_STEP};
pub use params::{adam_step, uniform_init, AdamConfig, ParamId, ParamStore};
pub use tape::{mean_groups, multi_head_attention, AttentionOutput, Gradients, Tape, Var};
pub use tensor::Tensor;
