//! Deterministic differentiable-compute substrate: tensors, a reverse-mode
//! tape over a fixed op set, SGD and a warmup-cosine learning-rate schedule.

mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, Optimizer, OptimizerState, sgd_step, sgd_update, LrSchedule, ScheduleKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine_similarity, dot, matmul, norm, softmax, Tensor};
