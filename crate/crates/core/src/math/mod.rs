//! Dense arithmetic, a small MLP, reverse-mode gradients and the optimizer.

mod linalg;
mod mlp;
mod optim;
mod tape;

pub use linalg::{log_softmax, softmax_logprob, softplus, Matrix, Vector};
pub use mlp::{Activation, Layer, Mlp};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use tape::{Gradients, Tape, Var};
