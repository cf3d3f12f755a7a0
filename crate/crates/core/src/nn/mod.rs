//! Just enough differentiable computation to train the coloring network:
//! dense matrices, a reverse-mode tape, MLP blocks, Adam and checkpoints.

mod checkpoint;
mod matrix;
mod mlp;
mod optim;
mod params;
pub(crate) mod tape;

pub use checkpoint::{Checkpoint, ParamRecord};
pub use matrix::Matrix;
pub use mlp::{mlp_forward, Activation, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{init_params, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var, LEAKY_SLOPE, STD_EPS};
