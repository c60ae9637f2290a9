//! Dense matrices, fully connected networks, and reverse-mode gradients.

mod matrix;
mod mlp;
mod optim;
mod tape;

pub(crate) use matrix::dot;
pub use matrix::Matrix;
pub use mlp::{Activation, MlpParams, MlpVars};
pub use optim::{clip_global_norm, Adam, CosineSchedule};
pub use tape::{Gradients, Tape, Var, GATHER_ZERO};
