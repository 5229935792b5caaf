//! Minimal reverse-mode differentiation for training small dense networks.

mod matrix;
mod net;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use net::{Activation, Dense, DenseNet, Parameterized};
pub use optim::{clip_global_norm, Adam};
pub use tape::{log_sum_exp, Gradients, Tape, Var};

pub(crate) use tape::sigmoid;
