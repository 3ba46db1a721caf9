//! Dense tensors, reverse-mode differentiation, gradient checking and the
//! optimizer used by every other module.

mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use optim::{adam_step, cosine_lr, AdamState, LrSchedule};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::moments;
