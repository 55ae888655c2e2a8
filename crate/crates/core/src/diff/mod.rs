//! Dense tensors with reverse-mode differentiation.

mod checkpoint;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_file_atomic, CheckpointEntry, CheckpointManifest};
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::{DType, Scalar};
pub use tape::{gelu_value, Grads, Tape, Var};
pub use tensor::Tensor;
