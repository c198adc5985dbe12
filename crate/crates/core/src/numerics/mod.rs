//! Deterministic small-tensor engine: values, reverse-mode tape, and optimizers.
//!
//! Training runs in `f32`; every operation is also available in `f64` for
//! finite-difference verification. All loops are single-threaded so a fixed
//! seed reproduces a bit-identical loss trajectory.

mod optim;
mod tape;
mod tensor;

pub use optim::{clip_grad_l2, ema_update, global_grad_norm, lr_at, AdamW, Ema, ScheduleConfig};
pub use tape::{Tape, Var};
pub use tensor::{argmax_slice, Scalar, Tensor};
