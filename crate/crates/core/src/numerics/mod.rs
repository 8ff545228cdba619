//! Differentiable-array substrate: tensors, operators, AdamW, finite-difference
//! checks and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedArray};
pub use gradcheck::{compare_gradients, finite_diff_check, GradCheckOptions, GradCheckReport};
pub use ops::{attention, attention_with_weights, embedding, kl_div, kl_div_rows, mean_pool};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule, Moments, OptimizerState, StepReport};
pub use param::{unique_parameters, zero_grads, Parameter};
pub use tensor::{grad_enabled, no_grad, Tensor};
